"""Shared test fixtures that are not oracles."""
import numpy as np

from metapid.augment import IDENTITY_FACTORS, AugmentedSample, Dataset
from metapid.metanet import backward, denormalize, head_bounds


def synthetic_dataset(n_samples, n_joints=2, seed=0):
    """Feature vectors at realistic scales paired with interior gains."""
    rng = np.random.default_rng(seed)
    b = head_bounds(n_joints)
    scale = np.array([1, 5, 1, 1, 3, .2, 1, .1, .05, .05])
    return Dataset([AugmentedSample("syn", v, rng.normal(size=10) * scale,
                                    denormalize(rng.uniform(0.1, 0.9, 3 * n_joints), b),
                                    float(rng.uniform(0, 5)), dict(IDENTITY_FACTORS), v)
                    for v in range(n_samples)])


def randomized_batch(n_joints, rng, size=3):
    X = rng.normal(size=(size, 10)) * 3
    Y = rng.uniform(0.05, 0.95, (size, 3 * n_joints))
    W = rng.uniform(0.5, 2.0, size)
    return X, Y, W


def fd_gradient_error(net, X, Y, W, h=1e-5, per_tensor=None, rng=None):
    """Worst relative error between analytic and central-difference gradients.

    ``per_tensor`` caps the number of probed entries per parameter tensor.
    """
    _, grads = backward(net, X, Y, W)
    worst, probed = 0.0, 0
    for name, p in net.params.items():
        idx = range(p.size) if per_tensor is None or p.size <= per_tensor else \
            rng.choice(p.size, per_tensor, replace=False)
        for j in idx:
            old = p.flat[j]
            p.flat[j] = old + h
            lp = backward(net, X, Y, W)[0]
            p.flat[j] = old - h
            lm = backward(net, X, Y, W)[0]
            p.flat[j] = old
            num, ana = (lp - lm) / (2 * h), grads[name].flat[j]
            scale = max(abs(num), abs(ana))
            if scale > 1e-7:  # below this both are finite-difference noise
                worst = max(worst, abs(num - ana) / scale)
            probed += 1
    return worst, probed
