"""
Online gain adaptation with PPO
===============================

Start from gains with joint 1's Kp cut in half and train a policy that
rescales Kp and Kd every 50 control steps. Then compare fixed and adapted
gains under a random-force disturbance.
"""

import numpy as np

from metapid.evaluation import Controller, detune, episode_trajectory, evaluate_matrix
from metapid.optimizer import hybrid_optimize
from metapid.plant import DisturbanceKind, DisturbanceScenario, preset
from metapid.rladapt import PPOConfig, learning_progress, train_rl

model = preset("toy2")
tuned = hybrid_optimize(model, episode_trajectory(2, 0, 0), np.random.default_rng(0)).gains
start = detune(tuned, joint=0, factor=0.5)

# 24 iterations of 8 envs x 256 decisions
cfg = PPOConfig(steps_per_env=256, seed=0)
policy, log = train_rl(model, start, cfg=cfg)
first, last = learning_progress(log)
print(f"{len(log)} iterations, episode reward {first:.2f} -> {last:.2f}")
for row in log[::6]:
    print(f"  iter {row['iteration']:2d}  reward {row['mean_ep_reward']:7.2f}  "
          f"clip {row['clip_fraction']:.3f}  entropy {row['entropy']:.3f}")

scenarios = [DisturbanceScenario(DisturbanceKind.NONE), DisturbanceScenario(DisturbanceKind.RANDOM_FORCE)]
report = evaluate_matrix(model, [Controller("fixed", start), Controller("adapted", start, policy)],
                         scenarios, seeds=[0, 1, 2], episodes_per=2)
for imp in report.improvements:
    print(f"{imp['scenario']:12s} MAE improvement {imp['mae_pct']:+.1f}%  "
          f"per joint {np.round(imp['per_joint_mae_pct'], 1)}")
