"""Online PID gain adaptation with PPO.

An agent observes a 23-dim summary of the closed loop every
``decision_interval`` control steps and rescales all proportional and all
derivative gains by ``(1 + delta)``. The environment batch, the policy and
value networks, GAE and the clipped-surrogate update are plain numpy.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _sim
from .errors import ConfigError, DataError, NumericError, ParseError, SchemaVersionError
from .pid import INTEGRAL_CLAMP, KD_BOUNDS, KP_BOUNDS, PIDGains
from .plant import (
    FRICTION_EPS, DisturbanceKind, DisturbanceScenario, RobotModel, TrajectorySpec,
    disturbance_key, episode_model, force_schedule, random_trajectory,
)

log = logging.getLogger(__name__)

STATE_DIM = 23
STATE_JOINTS = 9
ACTION_DIM = 2
ACTION_LIMIT = 0.2
REWARD_RANGE = (-100.0, 10.0)
LOG_STD_RANGE = (-5.0, 1.0)
DECISION_INTERVAL = 50
LOG_COLUMNS = ("iteration", "timesteps", "mean_ep_reward", "policy_loss", "value_loss",
               "entropy", "clip_fraction", "grad_norm")


@dataclass(frozen=True)
class AdaptAction:
    delta_kp: float
    delta_kd: float

    def __post_init__(self):
        for v in (self.delta_kp, self.delta_kd):
            if not -ACTION_LIMIT - 1e-12 <= v <= ACTION_LIMIT + 1e-12:
                raise ValueError(f"action component {v} outside [-{ACTION_LIMIT}, {ACTION_LIMIT}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_kp, self.delta_kd])


@dataclass(frozen=True)
class PPOConfig:
    total_timesteps: int = 50_000
    n_envs: int = 8
    steps_per_env: int = 2048
    batch: int = 256
    epochs: int = 10
    clip: float = 0.2
    lr: float = 1e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.02
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0
    # environment
    episode_steps: int = 2000
    decision_interval: int = DECISION_INTERVAL
    reward: str = "eq12"  # or "appendix"
    init_log_std: float = -1.0
    hidden: int = 256

    def __post_init__(self):
        ints = ("total_timesteps", "n_envs", "steps_per_env", "batch", "epochs",
                "episode_steps", "decision_interval", "hidden")
        for k in ints:
            if int(getattr(self, k)) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("clip", "lr", "max_grad_norm"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("gamma", "gae_lambda"):
            if not 0 <= getattr(self, k) <= 1:
                raise ConfigError(f"{k} must lie in [0, 1]")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if (self.n_envs * self.steps_per_env) % self.batch:
            raise ConfigError("batch must divide n_envs * steps_per_env")
        if self.episode_steps % self.decision_interval:
            raise ConfigError("decision_interval must divide episode_steps")
        if self.reward not in ("eq12", "appendix"):
            raise ConfigError(f"unknown reward variant {self.reward!r}")
        if not LOG_STD_RANGE[0] <= self.init_log_std <= LOG_STD_RANGE[1]:
            raise ConfigError("init_log_std outside the log-std clamp")

    @property
    def iterations(self) -> int:
        return max(1, self.total_timesteps // (self.n_envs * self.steps_per_env))


# --- state / reward / action ------------------------------------------------

def _norm(v, bounds):
    lo, hi = bounds
    return (v - lo) / (hi - lo)


def build_state(error, qd, gains: PIDGains, time_fraction: float,
                spec: TrajectorySpec) -> np.ndarray:
    """23-vector: errors and velocities of up to 9 joints (zero padded), mean
    normalized Kp and Kd, episode-time fraction, mean amplitude and mean
    frequency of the reference.

    Robots with more than 9 joints report the 9 largest-|error| joints, in
    joint order.
    """
    error = np.asarray(error, dtype=float)
    qd = np.asarray(qd, dtype=float)
    n = error.size
    if n > STATE_JOINTS:
        keep = np.sort(np.argsort(-np.abs(error), kind="stable")[:STATE_JOINTS])
        error, qd = error[keep], qd[keep]
        n = STATE_JOINTS
    s = np.zeros(STATE_DIM)
    s[:n] = error
    s[STATE_JOINTS:STATE_JOINTS + n] = qd
    s[18] = _norm(np.mean(gains.kp), KP_BOUNDS)
    s[19] = _norm(np.mean(gains.kd), KD_BOUNDS)
    s[20] = time_fraction
    s[21] = np.mean(spec.amplitude)
    s[22] = np.mean(spec.frequency)
    return s


def compute_reward(e, qd, a, n: int) -> float:
    """Tracking/smoothness/effort reward, clipped to [-100, 10]."""
    a = a.as_array() if isinstance(a, AdaptAction) else np.asarray(a, dtype=float)
    r = (-10.0 * np.linalg.norm(e) / np.sqrt(n) - 0.1 * np.linalg.norm(qd) / np.sqrt(n)
         - 0.1 * np.linalg.norm(a))
    return float(np.clip(r, *REWARD_RANGE))


def _window_reward_eq12(err, qd, actions):
    """Mean per-step reward over each env's window; err/qd are (B, W, n)."""
    n = err.shape[-1]
    r = (-10.0 * np.linalg.norm(err, axis=-1) / np.sqrt(n)
         - 0.1 * np.linalg.norm(qd, axis=-1) / np.sqrt(n)
         - 0.1 * np.linalg.norm(actions, axis=-1)[:, None])
    return np.clip(r, *REWARD_RANGE).mean(axis=1)


def _window_reward_appendix(err, qd, qd_ref, dt, gain_change):
    """Alternative shaped reward: position and velocity error, jerk and gain
    change penalties, +10 when the error norm is under 5 degrees."""
    pos = np.linalg.norm(err, axis=-1)
    vel = np.linalg.norm(qd - qd_ref, axis=-1)
    acc = np.diff(qd, axis=1) / dt
    jerk = np.zeros_like(pos)
    jerk[:, 2:] = np.linalg.norm(np.diff(acc, axis=1), axis=-1)
    bonus = np.where(pos < np.radians(5.0), 10.0, 0.0)
    r = -pos - 0.5 * vel - 0.1 * jerk - 0.05 * gain_change[:, None] + bonus
    return np.clip(r, *REWARD_RANGE).mean(axis=1)


def apply_action(gains: PIDGains, a) -> PIDGains:
    """Scale every Kp by ``1 + delta_kp`` and every Kd by ``1 + delta_kd``,
    clamped to the gain bounds; Ki is untouched."""
    a = a.as_array() if isinstance(a, AdaptAction) else np.asarray(a, dtype=float)
    return PIDGains(kp=np.clip(gains.kp * (1 + a[0]), *KP_BOUNDS), ki=gains.ki,
                    kd=np.clip(gains.kd * (1 + a[1]), *KD_BOUNDS))


# --- GAE --------------------------------------------------------------------

def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimates over a time-major rollout.

    ``rewards``/``dones`` are (T,) or (T, B); ``values`` carries one extra
    bootstrap row. Returns ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if values.shape[0] != rewards.shape[0] + 1 or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(f"values must have shape ({rewards.shape[0] + 1}, ...) "
                         f"matching rewards {rewards.shape}, got {values.shape}")
    if dones.shape != rewards.shape:
        raise ValueError("dones and rewards differ in shape")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * live * values[t + 1] - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values[:-1]


# --- networks ---------------------------------------------------------------

def _dense_init(rng, fan_out, fan_in, scale=1.0):
    bound = np.sqrt(1.0 / fan_in)
    return scale * rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)


@dataclass
class PolicyNet:
    """Tanh actor-critic. The actor emits the pre-squash Gaussian mean; the
    log-std is a free parameter vector, clamped when used."""

    params: dict

    @property
    def hidden(self) -> int:
        return self.params["a_W1"].shape[0]

    def copy(self) -> "PolicyNet":
        return PolicyNet(copy.deepcopy(self.params))


def init_policy(seed=0, hidden: int = 256, init_log_std: float = -1.0) -> PolicyNet:
    rng = np.random.default_rng(seed)
    p = {}
    for pre, out, scale in (("a", ACTION_DIM, 0.01), ("c", 1, 1.0)):
        p[f"{pre}_W1"], p[f"{pre}_b1"] = _dense_init(rng, hidden, STATE_DIM)
        p[f"{pre}_W2"], p[f"{pre}_b2"] = _dense_init(rng, hidden, hidden)
        p[f"{pre}_W3"], p[f"{pre}_b3"] = _dense_init(rng, out, hidden, scale)
    p["log_std"] = np.full(ACTION_DIM, float(init_log_std))
    return PolicyNet(p)


def _mlp(p, pre, x):
    h1 = np.tanh(x @ p[f"{pre}_W1"].T + p[f"{pre}_b1"])
    h2 = np.tanh(h1 @ p[f"{pre}_W2"].T + p[f"{pre}_b2"])
    return h2 @ p[f"{pre}_W3"].T + p[f"{pre}_b3"], (x, h1, h2)


def _mlp_backward(p, pre, cache, dout, g):
    x, h1, h2 = cache
    g[f"{pre}_W3"] = dout.T @ h2
    g[f"{pre}_b3"] = dout.sum(axis=0)
    dz2 = (dout @ p[f"{pre}_W3"]) * (1 - h2 ** 2)
    g[f"{pre}_W2"] = dz2.T @ h1
    g[f"{pre}_b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p[f"{pre}_W2"]) * (1 - h1 ** 2)
    g[f"{pre}_W1"] = dz1.T @ x
    g[f"{pre}_b1"] = dz1.sum(axis=0)


def _log_std(policy):
    return np.clip(policy.params["log_std"], *LOG_STD_RANGE)


def policy_forward(policy: PolicyNet, states):
    """Pre-squash action means (B, 2), clamped log-std (2,), values (B,)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    mean, _ = _mlp(policy.params, "a", states)
    value, _ = _mlp(policy.params, "c", states)
    return mean, _log_std(policy), value[:, 0]


def squash(u):
    return ACTION_LIMIT * np.tanh(u)


def _gauss_logp(u, mean, log_std):
    z = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2 * np.pi), axis=-1)


def policy_act(policy: PolicyNet, state, deterministic: bool = True, rng=None) -> AdaptAction:
    """One action for one 23-dim state."""
    state = np.asarray(state, dtype=float)
    if state.shape != (STATE_DIM,):
        raise ValueError(f"state must have length {STATE_DIM}, got {state.shape}")
    mean, log_std, _ = policy_forward(policy, state)
    u = mean[0]
    if not deterministic:
        u = u + np.exp(log_std) * np.random.default_rng(rng).standard_normal(ACTION_DIM)
    a = squash(u)
    return AdaptAction(float(a[0]), float(a[1]))


# --- environment batch --------------------------------------------------------

class AdaptEnv:
    """``n_envs`` independent closed loops sharing one base robot.

    Every episode restarts from ``init_gains`` on the reference, with a fresh
    trajectory (unless ``spec`` is fixed) and a fresh disturbance draw. Per-env
    randomness derives from ``(seed, env index)`` only, so the batch is
    reproducible whatever ``jobs`` is.
    """

    def __init__(self, model: RobotModel, init_gains: PIDGains,
                 scenario: DisturbanceScenario | None = None, n_envs: int = 1, seed: int = 0,
                 spec: TrajectorySpec | None = None, episode_steps: int = 2000,
                 decision_interval: int = DECISION_INTERVAL, reward: str = "eq12",
                 jobs: int = 1):
        if init_gains.n_joints != model.n_joints:
            raise ConfigError(f"gains cover {init_gains.n_joints} joints, robot has {model.n_joints}")
        if not init_gains.within_bounds():
            raise ConfigError("initial gains violate the gain bounds")
        if episode_steps % decision_interval:
            raise ConfigError("decision_interval must divide episode_steps")
        self.model, self.init_gains = model, init_gains
        self.scenario = scenario or DisturbanceScenario(DisturbanceKind.NONE)
        self.n_envs, self.seed, self.fixed_spec = n_envs, int(seed), spec
        self.T, self.W, self.reward_kind, self.jobs = episode_steps, decision_interval, reward, jobs
        n, B = model.n_joints, n_envs
        self.n = n
        self.n_periods = -(-episode_steps // self.scenario.force_period)
        z = lambda: np.zeros((B, n))  # noqa: E731
        self.q, self.qd, self.integ, self.prev_e = z(), z(), z(), z()
        self.init = np.zeros((B, 1), dtype=np.int64)
        self.kp, self.ki, self.kd = z(), z(), z()
        self.inertia, self.damping, self.coulomb, self.gravity, self.tlim = z(), z(), z(), z(), z()
        self.amp, self.freq, self.phase, self.offset = z(), z(), z(), z()
        self.dist = np.zeros((B, self.n_periods, n))
        self.step_idx = np.zeros(B, dtype=np.int64)
        self.episode = np.zeros(B, dtype=np.int64)
        self.specs = [None] * B
        self.rngs = [np.random.default_rng(np.random.SeedSequence([self.seed, b])) for b in range(B)]
        self.err_buf = np.zeros((B, self.W, n))
        self.qd_buf = np.zeros((B, self.W, n))
        self.done_buf = np.zeros(B, dtype=np.int64)
        for b in range(B):
            self.reset_env(b)

    def reset_env(self, b: int, spec: TrajectorySpec | None = None, key=None) -> None:
        spec = spec or self.fixed_spec or random_trajectory(self.n, self.rngs[b], self.T)
        if spec.n_joints != self.n:
            raise ConfigError(f"trajectory has {spec.n_joints} joints, robot has {self.n}")
        if key is None:
            key = disturbance_key(self.seed, self.scenario, int(self.episode[b])) + (b,)
        m = episode_model(self.scenario, self.model, key)
        self.specs[b] = spec
        self.inertia[b], self.damping[b], self.coulomb[b] = (
            m.inertia_per_joint, m.viscous_damping, m.coulomb_friction)
        self.gravity[b], self.tlim[b] = m.gravity_gain, m.torque_limit
        self.amp[b], self.freq[b], self.phase[b], self.offset[b] = (
            spec.amplitude, spec.frequency, spec.phase, spec.offset)
        self.dist[b] = force_schedule(self.scenario, m, key, self.n_periods * self.scenario.force_period)
        w = 2 * np.pi * spec.frequency
        self.q[b] = spec.amplitude * np.sin(spec.phase) + spec.offset
        self.qd[b] = spec.amplitude * w * np.cos(spec.phase)
        self.integ[b] = 0.0
        self.prev_e[b] = 0.0
        self.init[b] = 0
        self.kp[b], self.ki[b], self.kd[b] = self.init_gains.kp, self.init_gains.ki, self.init_gains.kd
        self.step_idx[b] = 0

    def gains(self, b: int) -> PIDGains:
        return PIDGains(kp=self.kp[b].copy(), ki=self.ki[b].copy(), kd=self.kd[b].copy())

    def _reference(self, b: int):
        t = self.step_idx[b] * self.specs[b].dt
        return self.amp[b] * np.sin(2 * np.pi * self.freq[b] * t + self.phase[b]) + self.offset[b]

    def observe(self) -> np.ndarray:
        out = np.empty((self.n_envs, STATE_DIM))
        for b in range(self.n_envs):
            e = self._reference(b) - self.q[b]
            out[b] = build_state(e, self.qd[b], self.gains(b), self.step_idx[b] / self.T, self.specs[b])
        return out

    def _advance(self, idx) -> None:
        for b in idx:
            self.done_buf[b] = _sim.run_segment(
                self.q[b], self.qd[b], self.integ[b], self.prev_e[b], self.init[b],
                self.kp[b], self.ki[b], self.kd[b], self.inertia[b], self.damping[b],
                self.coulomb[b], self.gravity[b], self.tlim[b], self.amp[b], self.freq[b],
                self.phase[b], self.offset[b], self.specs[b].dt, int(self.step_idx[b]), self.W,
                self.dist[b], self.scenario.force_period, self.err_buf[b], self.qd_buf[b],
                INTEGRAL_CLAMP, FRICTION_EPS, _sim.DIVERGENCE_LIMIT)

    def step(self, actions):
        """Apply one action per env, run one decision window.

        Returns ``(rewards, dones, info)``; ``info`` holds the window's
        ``err``/``qd`` buffers (copies), ``unstable`` flags and the gains used.
        Finished envs are reset automatically; ``info["final_step"]`` records
        how far each episode got.
        """
        actions = np.asarray(actions, dtype=float).reshape(self.n_envs, ACTION_DIM)
        if np.any(np.abs(actions) > ACTION_LIMIT + 1e-12):
            raise ValueError("action outside the action bounds")
        old_kp, old_kd = self.kp.copy(), self.kd.copy()
        self.kp[:] = np.clip(self.kp * (1 + actions[:, :1]), *KP_BOUNDS)
        self.kd[:] = np.clip(self.kd * (1 + actions[:, 1:]), *KD_BOUNDS)
        used = [self.gains(b) for b in range(self.n_envs)]

        if self.jobs > 1 and self.n_envs > 1:
            chunks = np.array_split(np.arange(self.n_envs), min(self.jobs, self.n_envs))
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                list(pool.map(self._advance, chunks))
        else:
            self._advance(range(self.n_envs))

        unstable = self.done_buf < self.W
        if self.reward_kind == "eq12":
            rewards = _window_reward_eq12(self.err_buf, self.qd_buf, actions)
        else:
            t = (self.step_idx[:, None] + np.arange(self.W)) * np.array([s.dt for s in self.specs])[:, None]
            w = 2 * np.pi * self.freq
            qd_ref = self.amp[:, None, :] * w[:, None, :] * np.cos(
                w[:, None, :] * t[:, :, None] + self.phase[:, None, :])
            change = np.sqrt(((self.kp - old_kp) / (KP_BOUNDS[1] - KP_BOUNDS[0])) ** 2
                             + ((self.kd - old_kd) / (KD_BOUNDS[1] - KD_BOUNDS[0])) ** 2).sum(axis=1)
            rewards = _window_reward_appendix(self.err_buf, self.qd_buf, qd_ref,
                                              self.specs[0].dt, change)
        rewards = np.where(unstable, REWARD_RANGE[0], rewards)
        self.step_idx += self.W
        dones = unstable | (self.step_idx >= self.T)
        info = {"err": self.err_buf.copy(), "qd": self.qd_buf.copy(), "unstable": unstable.copy(),
                "completed": self.done_buf.copy(), "gains": used, "final_step": self.step_idx.copy()}
        for b in np.flatnonzero(dones):
            self.episode[b] += 1
            self.reset_env(b)
        return rewards, dones, info


# --- PPO --------------------------------------------------------------------

class _Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps, self.t = lr, betas, eps, 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1 ** self.t)
            vh = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def standardize(x):
    x = np.asarray(x, dtype=float)
    mu = x.mean()
    sd = x.std()
    return (x - mu) / sd if sd > 0 else x - mu


def ppo_loss_and_grads(policy: PolicyNet, batch: dict, cfg: PPOConfig):
    """Clipped-surrogate loss, diagnostics and raw gradients for one minibatch.

    ``batch`` needs ``states``, ``u`` (pre-squash actions), ``logp``,
    ``adv`` (already standardized) and ``returns``.
    """
    p = policy.params
    S, U = batch["states"], batch["u"]
    A, R, old_logp = batch["adv"], batch["returns"], batch["logp"]
    B = S.shape[0]
    mean, acache = _mlp(p, "a", S)
    value, ccache = _mlp(p, "c", S)
    value = value[:, 0]
    log_std = _log_std(policy)
    std = np.exp(log_std)
    logp = _gauss_logp(U, mean, log_std)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    surr1, surr2 = ratio * A, clipped * A
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    value_loss = float(np.mean((value - R) ** 2))
    entropy = float(np.sum(log_std + 0.5 * np.log(2 * np.pi * np.e)))
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    clip_fraction = float(np.mean(np.abs(ratio - 1) > cfg.clip))

    # min() follows the unclipped branch where surr1 <= surr2
    dratio = np.where(surr1 <= surr2, -A / B, 0.0)
    dlogp = dratio * ratio
    z = (U - mean) / std
    dmean = dlogp[:, None] * z / std
    dlog_std = (dlogp[:, None] * (z * z - 1)).sum(axis=0) - cfg.entropy_coef
    inside = (p["log_std"] >= LOG_STD_RANGE[0]) & (p["log_std"] <= LOG_STD_RANGE[1])
    g = {"log_std": dlog_std * inside}
    _mlp_backward(p, "a", acache, dmean, g)
    dvalue = (cfg.value_coef * 2.0 / B) * (value - R)
    _mlp_backward(p, "c", ccache, dvalue[:, None], g)
    diag = {"loss": total, "policy_loss": policy_loss, "value_loss": value_loss,
            "entropy": entropy, "clip_fraction": clip_fraction}
    return diag, {k: g[k] for k in p}


def clip_grad_norm(grads: dict, max_norm: float):
    """Scale ``grads`` in place to global norm ``<= max_norm``; returns
    ``(norm_before, norm_after)``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
        return norm, max_norm * (1 - 1e-12)
    return norm, norm


def ppo_update(policy: PolicyNet, rollout: dict, cfg: PPOConfig, opt=None, rng=None) -> dict:
    """``cfg.epochs`` passes of shuffled minibatch updates on ``rollout``.

    Advantages are standardized per minibatch. Returns the diagnostics
    averaged over all minibatch steps (``grad_norm`` is post-clip).
    """
    opt = opt or _Adam(policy.params, cfg.lr)
    rng = np.random.default_rng(rng)
    N = rollout["states"].shape[0]
    if N % cfg.batch:
        raise ConfigError(f"minibatch size {cfg.batch} does not divide rollout size {N}")
    sums = {}
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for start in range(0, N, cfg.batch):
            idx = order[start:start + cfg.batch]
            mb = {k: rollout[k][idx] for k in ("states", "u", "logp", "returns")}
            mb["adv"] = standardize(rollout["adv"][idx])
            diag, grads = ppo_loss_and_grads(policy, mb, cfg)
            if not np.isfinite(diag["loss"]):
                raise NumericError(f"non-finite PPO loss: {json.dumps(diag)}")
            pre, post = clip_grad_norm(grads, cfg.max_grad_norm)
            if not np.isfinite(pre):
                raise NumericError(f"non-finite gradient norm: {json.dumps(diag)}")
            opt.step(policy.params, grads)
            diag["grad_norm"] = post
            diag["grad_norm_raw"] = pre
            for k, v in diag.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in sums.items()}


def collect_rollout(policy: PolicyNet, env: AdaptEnv, n_steps: int, obs, ep_returns,
                    finished: list):
    """Roll ``env`` forward ``n_steps`` decisions with a sampled policy.

    ``ep_returns`` accumulates the running episode reward per env; complete
    episode returns are appended to ``finished``. Returns the time-major
    arrays and the next observation.
    """
    B = env.n_envs
    S = np.zeros((n_steps, B, STATE_DIM))
    Uu = np.zeros((n_steps, B, ACTION_DIM))
    LP = np.zeros((n_steps, B))
    V = np.zeros((n_steps + 1, B))
    R = np.zeros((n_steps, B))
    D = np.zeros((n_steps, B))
    for t in range(n_steps):
        mean, log_std, value = policy_forward(policy, obs)
        noise = np.stack([env.rngs[b].standard_normal(ACTION_DIM) for b in range(B)])
        u = mean + np.exp(log_std) * noise
        S[t], Uu[t], V[t] = obs, u, value
        LP[t] = _gauss_logp(u, mean, log_std)
        rewards, dones, _ = env.step(squash(u))
        R[t], D[t] = rewards, dones
        ep_returns += rewards
        for b in np.flatnonzero(dones):
            finished.append(float(ep_returns[b]))
            ep_returns[b] = 0.0
        obs = env.observe()
    V[n_steps] = policy_forward(policy, obs)[2]
    return {"states": S, "u": Uu, "logp": LP, "values": V, "rewards": R, "dones": D}, obs


def train_rl(model: RobotModel, init_gains: PIDGains, scenario: DisturbanceScenario | None = None,
             cfg: PPOConfig = PPOConfig(), spec: TrajectorySpec | None = None, jobs: int = 1,
             policy: PolicyNet | None = None):
    """Train a gain-adaptation policy with PPO.

    Returns ``(policy, log)`` where ``log`` is a list of per-iteration dicts
    with the :data:`LOG_COLUMNS` keys.
    """
    env = AdaptEnv(model, init_gains, scenario, cfg.n_envs, cfg.seed, spec,
                   cfg.episode_steps, cfg.decision_interval, cfg.reward, jobs)
    policy = policy.copy() if policy else init_policy(
        np.random.SeedSequence([cfg.seed, 1]), cfg.hidden, cfg.init_log_std)
    opt = _Adam(policy.params, cfg.lr)
    obs = env.observe()
    ep_returns = np.zeros(cfg.n_envs)
    log_rows = []
    last_mean = float("nan")
    for it in range(cfg.iterations):
        finished = []
        ro, obs = collect_rollout(policy, env, cfg.steps_per_env, obs, ep_returns, finished)
        adv, ret = gae(ro["rewards"], ro["values"], ro["dones"], cfg.gamma, cfg.gae_lambda)
        flat = {"states": ro["states"].reshape(-1, STATE_DIM), "u": ro["u"].reshape(-1, ACTION_DIM),
                "logp": ro["logp"].reshape(-1), "adv": adv.reshape(-1), "returns": ret.reshape(-1)}
        diag = ppo_update(policy, flat, cfg, opt, np.random.SeedSequence([cfg.seed, 2, it]))
        if finished:
            last_mean = float(np.mean(finished))
        row = {"iteration": it + 1, "timesteps": (it + 1) * cfg.n_envs * cfg.steps_per_env,
               "mean_ep_reward": last_mean,
               **{k: diag[k] for k in LOG_COLUMNS[3:]}}
        log_rows.append(row)
        log.info("iter=%d reward=%.4g policy_loss=%.4g value_loss=%.4g clip=%.3f",
                 row["iteration"], row["mean_ep_reward"], row["policy_loss"],
                 row["value_loss"], row["clip_fraction"])
    return policy, log_rows


def learning_progress(log_rows) -> tuple:
    """Mean episode reward over the first and the final 10% of iterations."""
    r = np.array([row["mean_ep_reward"] for row in log_rows], dtype=float)
    k = max(1, int(round(0.1 * r.size)))
    return float(np.nanmean(r[:k])), float(np.nanmean(r[-k:]))


# --- persistence --------------------------------------------------------------

def save_policy(policy: PolicyNet, path, cfg: PPOConfig | None = None) -> None:
    doc = {"schema_version": 1, "kind": "policy", "state_dim": STATE_DIM,
           "action_dim": ACTION_DIM, "hidden": policy.hidden,
           "params": {k: v.tolist() for k, v in policy.params.items()},
           "config": asdict(cfg) if cfg else None}
    Path(path).write_text(json.dumps(doc) + "\n")


def _policy_shapes(hidden):
    s = {}
    for pre, out in (("a", ACTION_DIM), ("c", 1)):
        s.update({f"{pre}_W1": (hidden, STATE_DIM), f"{pre}_b1": (hidden,),
                  f"{pre}_W2": (hidden, hidden), f"{pre}_b2": (hidden,),
                  f"{pre}_W3": (out, hidden), f"{pre}_b3": (out,)})
    s["log_std"] = (ACTION_DIM,)
    return s


def load_policy(path) -> PolicyNet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if doc.get("kind") != "policy":
        raise DataError(f"{path}: not a policy checkpoint")
    if doc.get("schema_version") != 1:
        raise SchemaVersionError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    shapes = _policy_shapes(int(doc["hidden"]))
    if set(doc["params"]) != set(shapes):
        raise DataError(f"{path}: parameter names do not match the architecture")
    params = {}
    for k, shape in shapes.items():
        arr = np.array(doc["params"][k], dtype=float)
        if arr.shape != shape:
            raise DataError(f"{path}: {k} has shape {arr.shape}, expected {shape}")
        params[k] = arr
    return PolicyNet(params)


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(row[k])) if k not in ("iteration", "timesteps") else int(row[k])
                        for k in LOG_COLUMNS})


def read_training_log(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(LOG_COLUMNS):
        raise DataError(f"{path}: unexpected columns {sorted(rows[0])}")
    return [{k: (int(v) if k in ("iteration", "timesteps") else float(v)) for k, v in r.items()}
            for r in rows]
