"""
Predicting gains from robot features
====================================

Build a small augmented dataset of perturbed robots, train the feature to
gains network on it, and compare its prediction for an unseen variant with
gains tuned directly.
"""

import numpy as np

from metapid.augment import PerturbationRanges, build_dataset, filter_dataset, perturb_robot
from metapid.evaluation import episode_trajectory, run_episode
from metapid.metanet import TrainConfig, init_network, predict_gains, train
from metapid.optimizer import hybrid_optimize
from metapid.plant import preset

base = preset("toy2")

# 40 perturbed copies plus the base, each tuned by the hybrid optimizer
data = build_dataset([base], 40, seed=0)
kept = filter_dataset(data, threshold_deg=30.0)
print(f"{len(data)} samples, {len(kept)} kept, mean error {kept.errors.mean():.2f} deg")

net, history = train(init_network(2, seed=0), kept, TrainConfig(max_epochs=200))
print(f"stopped after {len(history)} epochs, best val loss "
      f"{min(h['val_loss'] for h in history):.4f}")

# a variant the network has not seen
variant, factors = perturb_robot(base, PerturbationRanges(), rng=12345)
print("variant factors:", {k: round(v, 3) for k, v in factors.items()})
spec = episode_trajectory(2, seed=1, episode=0)

predicted = predict_gains(net, variant)
tuned = hybrid_optimize(variant, spec, np.random.default_rng(1)).gains
for name, gains in (("predicted", predicted), ("tuned", tuned)):
    print(f"{name:9s} Kp {np.round(gains.kp, 1)}  MAE {run_episode(variant, gains, spec=spec).mae:.3f} deg")
