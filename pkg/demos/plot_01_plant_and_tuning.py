"""
Tuning PID gains on the two-joint plant
=======================================

Simulate the toy arm under hand-picked gains, then let differential evolution
plus a Nelder-Mead polish find better ones.
"""

import numpy as np

from metapid.evaluation import episode_trajectory, run_episode
from metapid.optimizer import evaluate_gains, hybrid_optimize
from metapid.pid import PIDGains
from metapid.plant import extract_features, preset

# the toy arm: a heavy proximal link and a light distal one
model = preset("toy2")
print("features:", np.round(extract_features(model), 3))

# a random sinusoidal reference, reproducible from (seed, episode)
spec = episode_trajectory(model.n_joints, seed=0, episode=0)

# hand-picked gains as a starting point
guess = PIDGains.uniform(2, kp=50.0, ki=0.0, kd=5.0)
print(f"hand-picked cost: {evaluate_gains(model, guess, spec):.3f} deg RMS")

# 8 x 15 DE generations, then 20 simplex iterations
result = hybrid_optimize(model, spec, np.random.default_rng(0))
print(f"DE cost {result.stage_costs[0]:.3f}, after polish {result.stage_costs[1]:.3f} deg "
      f"({result.evaluations} evaluations)")
print("tuned Kp:", np.round(result.gains.kp, 1), "Kd:", np.round(result.gains.kd, 1))

# the four tracking metrics for both gain sets
for name, gains in (("hand-picked", guess), ("tuned", result.gains)):
    r = run_episode(model, gains, spec=spec)
    print(f"{name:12s} mae {r.mae:.3f}  rmse {r.rmse:.3f}  max {r.max_error:.3f}  std {r.std_dev:.3f}")
