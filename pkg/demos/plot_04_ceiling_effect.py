"""
Where adaptation stops helping
==============================

Adaptation gains a lot when one joint is badly tuned and little once the
gains are already near optimal. One seed of the two-condition experiment
shows it.
"""

import json

from metapid.evaluation import ceiling_experiment
from metapid.rladapt import PPOConfig

out = ceiling_experiment(seed=0, cfg=PPOConfig(steps_per_env=256))
for name, c in out["conditions"].items():
    print(f"{name:12s} baseline {c['baseline_mae_deg']:.3f} deg -> adapted {c['adapted_mae_deg']:.3f} deg "
          f"({c['net_improvement_pct']:+.1f}%), per joint "
          f"{[round(v, 1) for v in c['per_joint_improvement_pct']]}")
print(f"gap: {out['gap_pct_points']:.1f} percentage points")
print(json.dumps({k: out[k] for k in ("seed", "robot", "tuned_cost_deg")}))
