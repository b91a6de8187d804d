"""
Encoder size and training stages
================================

Sweep two encoder sizes that share one output dimension, then compare
two-stage training against fine-tuning alone. The full run (three seeds)
takes a few minutes; pass ``--quick`` for one seed.
"""

import sys

from dualret.experiments import desk_trend_spec, run_ablation, run_scaling_sweep, summarize

seeds = (0,) if "--quick" in sys.argv else (0, 1, 2)
spec = desk_trend_spec(seeds)

# %%
# Held-out NDCG@10 per config, averaged over seeds.
sweep = run_scaling_sweep(spec)
print(summarize(sweep, "config"))
for name in spec.configs:
    print(name, sweep.select(config=name)[0]["params"], "parameters")

# %%
# Stage ablation on the smaller config.
ablation = run_ablation(spec, "S")
print(summarize(ablation, "arm"))
