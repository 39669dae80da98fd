"""Feature -> PID gain predictor.

Architecture (per sample, ``f`` z-scored with training statistics)::

    h1 = relu(LN(W1 f + b1))          10 -> 256
    h2 = relu(LN(W2 h1 + b2))        256 -> 256
    h  = relu(W3 h2 + b3)            256 -> 128
    kp, ki, kd = sigmoid(W_k h + b_k) 128 -> n  (three heads)

Head outputs live in (0, 1) and map linearly onto the gain bounds.
Gradients are derived by hand; there is no autodiff dependency.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaVersionError
from .optimizer import GainBounds
from .pid import KD_BOUNDS, KI_BOUNDS, KP_BOUNDS, PIDGains
from .plant import extract_features

log = logging.getLogger(__name__)

N_FEATURES = 10
LN_EPS = 1e-5
HEADS = ("kp", "ki", "kd")


def head_bounds(n_joints: int) -> GainBounds:
    """Bounds in head order ``[Kp_1..n, Ki_1..n, Kd_1..n]``."""
    lo = np.concatenate([np.full(n_joints, b[0]) for b in (KP_BOUNDS, KI_BOUNDS, KD_BOUNDS)])
    hi = np.concatenate([np.full(n_joints, b[1]) for b in (KP_BOUNDS, KI_BOUNDS, KD_BOUNDS)])
    return GainBounds(lo, hi)


def param_shapes(n_joints: int, enc: int = 256, hidden: int = 128) -> dict:
    shapes = {
        "W1": (enc, N_FEATURES), "b1": (enc,), "ln1_gamma": (enc,), "ln1_beta": (enc,),
        "W2": (enc, enc), "b2": (enc,), "ln2_gamma": (enc,), "ln2_beta": (enc,),
        "W3": (hidden, enc), "b3": (hidden,),
    }
    for h in HEADS:
        shapes[f"W_{h}"] = (n_joints, hidden)
        shapes[f"b_{h}"] = (n_joints,)
    return shapes


@dataclass
class MetaNetwork:
    params: dict
    n_joints: int
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    bounds: GainBounds | None = None

    def __post_init__(self):
        if self.bounds is None:
            self.bounds = head_bounds(self.n_joints)
        self.feature_mean = np.asarray(self.feature_mean, dtype=float)
        self.feature_std = np.asarray(self.feature_std, dtype=float)
        if np.any(self.feature_std <= 0):
            raise DataError("feature_std must be strictly positive")

    @property
    def dims(self) -> dict:
        return {"input": N_FEATURES, "enc": self.params["W1"].shape[0],
                "hidden": self.params["W3"].shape[0], "n_joints": self.n_joints}

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def init_network(n_joints: int, seed=0, enc: int = 256, hidden: int = 128) -> MetaNetwork:
    """Uniform(+-sqrt(1/fan_in)) weights and biases; LayerNorm gamma=1, beta=0."""
    if n_joints < 1:
        raise ConfigError("n_joints must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(n_joints, enc, hidden).items():
        if name.endswith("_gamma"):
            params[name] = np.ones(shape)
        elif name.endswith("_beta"):
            params[name] = np.zeros(shape)
        else:
            weight = "W" + name[1:] if name.startswith("b") else name
            fan_in = param_shapes(n_joints, enc, hidden)[weight][1]
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    return MetaNetwork(params, n_joints)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _layer_norm(z, gamma, beta):
    mu = z.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(z.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (z - mu) * inv
    return gamma * xhat + beta, (xhat, inv)


def _layer_norm_backward(dy, gamma, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dxhat = dy * gamma
    dz = (inv / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dz, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _forward_cached(net: MetaNetwork, features):
    p = net.params
    x = (np.atleast_2d(features) - net.feature_mean) / net.feature_std
    z1 = x @ p["W1"].T + p["b1"]
    n1, ln1 = _layer_norm(z1, p["ln1_gamma"], p["ln1_beta"])
    h1 = np.maximum(n1, 0.0)
    z2 = h1 @ p["W2"].T + p["b2"]
    n2, ln2 = _layer_norm(z2, p["ln2_gamma"], p["ln2_beta"])
    h2 = np.maximum(n2, 0.0)
    z3 = h2 @ p["W3"].T + p["b3"]
    h3 = np.maximum(z3, 0.0)
    outs = [_sigmoid(h3 @ p[f"W_{h}"].T + p[f"b_{h}"]) for h in HEADS]
    cache = (x, n1, ln1, h1, n2, ln2, h2, z3, h3, outs)
    return np.concatenate(outs, axis=1), cache


def forward(net: MetaNetwork, features):
    """Normalized gain predictions ``(kp, ki, kd)``, each in (0, 1).

    ``features`` may be one 10-vector (returns 1-D heads) or a (B, 10) batch.
    """
    f = np.asarray(features, dtype=float)
    if f.shape[-1] != N_FEATURES or f.ndim > 2:
        raise ValueError(f"features must have trailing length {N_FEATURES}, got shape {f.shape}")
    out, _ = _forward_cached(net, f)
    n = net.n_joints
    heads = out[:, :n], out[:, n:2 * n], out[:, 2 * n:]
    return tuple(h[0] for h in heads) if f.ndim == 1 else heads


def denormalize(norm, bounds: GainBounds) -> PIDGains:
    """Map head outputs in [0, 1] (head order kp, ki, kd) onto ``bounds``."""
    v = np.concatenate([np.ravel(a) for a in norm]) if isinstance(norm, tuple) else np.ravel(norm)
    v = np.asarray(v, dtype=float)
    if v.shape != bounds.lower.shape:
        raise ValueError(f"expected {bounds.lower.size} values, got {v.size}")
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise ValueError("normalized gains must lie in [0, 1]")
    g = bounds.lower + v * (bounds.upper - bounds.lower)
    n = g.size // 3
    return PIDGains(kp=g[:n], ki=g[n:2 * n], kd=g[2 * n:])


def normalize_gains(gains: PIDGains, bounds: GainBounds) -> np.ndarray:
    """Inverse of :func:`denormalize`: head-ordered vector in [0, 1]."""
    g = np.concatenate([gains.kp, gains.ki, gains.kd])
    width = np.where(bounds.upper > bounds.lower, bounds.upper - bounds.lower, 1.0)
    return np.clip((g - bounds.lower) / width, 0.0, 1.0)


def predict_gains(net: MetaNetwork, model) -> PIDGains:
    if model.n_joints != net.n_joints:
        raise DataError(f"network predicts {net.n_joints} joints, robot has {model.n_joints}")
    return denormalize(forward(net, extract_features(model)), net.bounds)


def weighted_mse(pred, target, weights) -> float:
    """``(1/N) sum_v w_v ||target_v - pred_v||^2``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if pred.shape != target.shape or weights.shape != (pred.shape[0],):
        raise ValueError("pred, target and weights disagree in shape")
    return float(np.mean(weights * np.sum((target - pred) ** 2, axis=1)))


def backward(net: MetaNetwork, features, targets, weights):
    """Loss and exact gradients of :func:`weighted_mse` for every parameter.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``net.params``.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    p = net.params
    pred, (x, n1, ln1, h1, n2, ln2, h2, z3, h3, outs) = _forward_cached(net, features)
    N = pred.shape[0]
    loss = weighted_mse(pred, targets, weights)
    dpred = (2.0 / N) * weights[:, None] * (pred - targets)

    g = {}
    n = net.n_joints
    dh3 = np.zeros_like(h3)
    for k, h in enumerate(HEADS):
        s = outs[k]
        dz = dpred[:, k * n:(k + 1) * n] * s * (1.0 - s)
        g[f"W_{h}"] = dz.T @ h3
        g[f"b_{h}"] = dz.sum(axis=0)
        dh3 += dz @ p[f"W_{h}"]
    dz3 = dh3 * (z3 > 0)
    g["W3"] = dz3.T @ h2
    g["b3"] = dz3.sum(axis=0)
    dh2 = dz3 @ p["W3"]
    dn2 = dh2 * (n2 > 0)
    dz2, g["ln2_gamma"], g["ln2_beta"] = _layer_norm_backward(dn2, p["ln2_gamma"], ln2)
    g["W2"] = dz2.T @ h1
    g["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ p["W2"]
    dn1 = dh1 * (n1 > 0)
    dz1, g["ln1_gamma"], g["ln1_beta"] = _layer_norm_backward(dn1, p["ln1_gamma"], ln1)
    g["W1"] = dz1.T @ x
    g["b1"] = dz1.sum(axis=0)
    return loss, {k: g[k] for k in p}


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 500
    early_stop_patience: int = 50
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive, weight_decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 0:
            raise ConfigError("batch_size and max_epochs must be >= 1, patience >= 0")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, grad in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * grad * grad
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def dataset_arrays(data, bounds: GainBounds):
    """Features, bound-normalized targets and quality weights of a dataset."""
    from .augment import sample_weights

    X = np.array([s.features for s in data.samples], dtype=float)
    Y = np.array([normalize_gains(s.gains, bounds) for s in data.samples], dtype=float)
    return X, Y, sample_weights(data)


def split_indices(n: int, val_fraction: float, seed) -> tuple:
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(net: MetaNetwork, data, cfg: TrainConfig = TrainConfig()):
    """Fit ``net`` on a (filtered) dataset with Adam and early stopping.

    Feature statistics come from the training split only. The returned
    network is a copy holding the best-validation-loss parameters; the
    history lists one ``{"epoch", "train_loss", "val_loss"}`` dict per epoch.
    """
    if len(data.samples) == 0:
        raise DataError("cannot train on an empty dataset")
    bad = {s.gains.n_joints for s in data.samples} - {net.n_joints}
    if bad:
        raise DataError(f"samples with {sorted(bad)} joints; network has {net.n_joints}")
    X, Y, W = dataset_arrays(data, net.bounds)
    tr, va = split_indices(len(X), cfg.val_fraction, cfg.seed)

    net = copy.deepcopy(net)
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0)
    net.feature_mean, net.feature_std = mean, np.where(std > 1e-12, std, 1.0)

    def loss_on(idx):
        pred, _ = _forward_cached(net, X[idx])
        return weighted_mse(pred, Y[idx], W[idx])

    opt = Adam(net.params, cfg.learning_rate)
    history = []
    best, best_params, stale = np.inf, copy.deepcopy(net.params), 0
    for epoch in range(cfg.max_epochs):
        order = tr[np.random.default_rng([cfg.seed, epoch]).permutation(len(tr))]
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = backward(net, X[idx], Y[idx], W[idx])
            if cfg.weight_decay:
                for k in grads:
                    grads[k] = grads[k] + cfg.weight_decay * net.params[k]
            opt.step(net.params, grads)
        train_loss = loss_on(tr)
        val_loss = loss_on(va) if len(va) else train_loss
        history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss})
        if not np.isfinite(train_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch + 1}")
        if val_loss < best:
            best, best_params, stale = val_loss, copy.deepcopy(net.params), 0
        else:
            stale += 1
        if stale >= cfg.early_stop_patience:
            break
    net.params = best_params
    log.info("trained %d epochs, best val loss %.4g", len(history), best)
    return net, history


# --- checkpoint -------------------------------------------------------------

def save_checkpoint(net: MetaNetwork, path) -> None:
    doc = {
        "schema_version": 1,
        "kind": "metanet",
        "n_joints": net.n_joints,
        "dims": net.dims,
        "params": {k: v.tolist() for k, v in net.params.items()},
        "feature_mean": net.feature_mean.tolist(),
        "feature_std": net.feature_std.tolist(),
        "bounds": net.bounds.to_dict(),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> MetaNetwork:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if doc.get("kind") != "metanet":
        raise DataError(f"{path}: not a metanet checkpoint")
    if doc.get("schema_version") != 1:
        raise SchemaVersionError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    n, dims = int(doc["n_joints"]), doc["dims"]
    shapes = param_shapes(n, dims["enc"], dims["hidden"])
    if set(doc["params"]) != set(shapes):
        raise DataError(f"{path}: parameter names do not match the architecture")
    params = {}
    for name, shape in shapes.items():
        arr = np.array(doc["params"][name], dtype=float)
        if arr.shape != shape:
            raise DataError(f"{path}: {name} has shape {arr.shape}, expected {shape}")
        params[name] = arr
    bounds = GainBounds.from_dict(doc["bounds"])
    if bounds.lower.shape != (3 * n,):
        raise DataError(f"{path}: bounds do not cover {3 * n} gains")
    mean, std = np.array(doc["feature_mean"]), np.array(doc["feature_std"])
    if mean.shape != (N_FEATURES,) or std.shape != (N_FEATURES,):
        raise DataError(f"{path}: feature statistics must have length {N_FEATURES}")
    return MetaNetwork(params, n, mean, std, bounds)
