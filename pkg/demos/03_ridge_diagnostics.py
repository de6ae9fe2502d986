"""Conflict and support diagnostics on the narrow ridge.

Reward is high only on a thin curve in action space. A critic-guided update
can pull the fit away from the data (positive directional damage) and push
actions off the support. The projected variant takes its guidance targets
from a frozen copy of the generator, so the fit and guidance gradients stop
fighting; latent steering keeps the decoder fixed but moves the latent freely
and tends to leave the data.

    python3 demos/03_ridge_diagnostics.py
"""

from dataclasses import replace

import numpy as np

from spar.anchor import Stage1Config, train_stage1
from spar.diagnostics import measure_conflict, policy_actions, support_distance_ratio
from spar.envs import generate_dataset, make_env
from spar.nn import make_rng
from spar.residual import PlasTrainer, Stage2Config, make_trainer
from spar.weighting import WeightingConfig

env = make_env("narrow-ridge")
ds = generate_dataset(env, "medium", 20_000, seed=0)
bundle = train_stage1(ds, Stage1Config(steps=3000, hidden=(64, 64)))
base = Stage2Config(steps=1000, hidden=(64, 64), cvae_hidden=(64, 64, 64),
                    latent_hidden=(64, 64), K=32,
                    weighting=WeightingConfig("exponential", "soft", 0.3))
states = ds.states[make_rng(5).choice(len(ds), 1000, replace=False)]

print(f"{'variant':>8} {'DD':>12} {'VSD':>12} {'support q95':>12}")
for variant in ("mlp", "proj", "plas"):
    tr = make_trainer(bundle, ds, replace(base, variant=variant))
    if isinstance(tr, PlasTrainer):
        tr.pretrain()
    tr.run(base.steps // 2)
    reps = [measure_conflict(tr, seed=i) for i in range(4)]
    tr.run(base.steps - base.steps // 2)
    acts = policy_actions(bundle, tr.result(), states, make_rng(9))
    sup = support_distance_ratio(ds, acts)
    print(f"{variant:>8} {np.mean([r.dd for r in reps]):>12.3e} "
          f"{np.mean([r.vsd for r in reps]):>12.3e} {sup.ratio_q95:>12.3f}")
