"""Independent reference implementations used as test oracles."""
import numpy as np

from metapid import _sim
from metapid.pid import PIDGains
from metapid.plant import make_reference


def reference_de(f, lo, hi, pop, gens, F, CR, seed):
    """Textbook DE/rand/1/bin with synchronous generations, written with plain
    loops. It consumes the generator in the same order as the library
    (init matrix, then per individual: 3 indices, d uniforms, forced index)."""
    rng = np.random.default_rng(seed)
    d = len(lo)
    X = [list(lo[j] + u * (hi[j] - lo[j]) for j, u in enumerate(row)) for row in rng.random((pop, d))]
    fx = [f(np.array(x)) for x in X]
    history = [min(fx)]
    for _ in range(gens):
        trials = []
        for i in range(pop):
            pool = [j for j in range(pop) if j != i]
            a, b, c = rng.choice(pool, size=3, replace=False)
            u = rng.random(d)
            jrand = rng.integers(d)
            t = []
            for j in range(d):
                v = X[a][j] + F * (X[b][j] - X[c][j]) if (u[j] < CR or j == jrand) else X[i][j]
                if v < lo[j]:
                    v = 2 * lo[j] - v
                if v > hi[j]:
                    v = 2 * hi[j] - v
                t.append(min(max(v, lo[j]), hi[j]))
            trials.append(t)
        for i in range(pop):
            ft = f(np.array(trials[i]))
            if ft < fx[i]:
                X[i], fx[i] = trials[i], ft
        history.append(min(fx))
    k = int(np.argmin(fx))
    return np.array(X[k]), fx[k], history


def joint_mse_table(model, spec, joint, kp_grid, kd_grid):
    """Mean squared tracking error of one joint over a (Kp, Kd) grid, Ki=0.

    Joints are dynamically decoupled, so the other joints' gains are fixed at
    an arbitrary stable value.
    """
    n = model.n_joints
    table = np.empty((len(kp_grid), len(kd_grid)))
    for a, kp in enumerate(kp_grid):
        for b, kd in enumerate(kd_grid):
            kps, kds = np.full(n, 50.0), np.full(n, 5.0)
            kps[joint], kds[joint] = kp, kd
            state = _sim.LoopState(*make_reference(spec, 0))
            done, err, _ = _sim.simulate(model, PIDGains(kps, np.zeros(n), kds), spec, state,
                                         0, spec.duration_steps)
            ok = done == spec.duration_steps and np.all(np.isfinite(err[:, joint]))
            table[a, b] = np.mean(err[:, joint] ** 2) if ok else np.inf
    return table


def grid_search_cost_deg(model, spec, points=21, lo=0.1, hi=500.0):
    """Best RMS tracking cost (degrees) over a per-joint (Kp, Kd) grid."""
    grid = np.linspace(lo, hi, points)
    best = [joint_mse_table(model, spec, j, grid, grid).min() for j in range(model.n_joints)]
    return float(np.degrees(np.sqrt(np.sum(best))))


def metrics_brute_force(e_rad):
    """mae, rmse, max, std (degrees) straight from the definitions."""
    T, n = len(e_rad), len(e_rad[0])
    e = [[float(np.degrees(e_rad[t][i])) for i in range(n)] for t in range(T)]
    mae = 0.0
    for i in range(n):
        s = 0.0
        for t in range(T):
            s += abs(e[t][i])
        mae += s / T
    mae /= n
    norms = []
    for t in range(T):
        s = 0.0
        for i in range(n):
            s += e[t][i] ** 2
        norms.append(s ** 0.5)
    rmse = (sum(x * x for x in norms) / T) ** 0.5
    mx = max(norms)
    mean = sum(norms) / T
    std = (sum((x - mean) ** 2 for x in norms) / T) ** 0.5
    return mae, rmse, mx, std


def gae_brute_force(rewards, values, dones, gamma, lam):
    """Advantages as explicit truncated sums of discounted TD residuals."""
    T = len(rewards)
    deltas = [rewards[t] + gamma * (1 - dones[t]) * values[t + 1] - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total, coef = 0.0, 1.0
        for k in range(t, T):
            total += coef * deltas[k]
            if dones[k]:
                break
            coef *= gamma * lam
        adv.append(total)
    return np.array(adv)
