"""Why a generative residual matters when the logged actions split in two.

The bimodal bandit is logged by a mixture of two experts whose actions sit on
opposite sides of the anchor. Cloning averages the modes and lands between
them; residuals around that average form two clusters. A unimodal regressor
again predicts their mean, while the latent-variable residual can sample
either mode and let the critic choose.

    python3 demos/02_bimodal_geometry.py
"""

from spar.anchor import Stage1Config, train_stage1
from spar.diagnostics import residual_geometry_summary
from spar.envs import generate_dataset, make_env
from spar.gate import ALWAYS_REJECT, GateConfig, evaluate_policy
from spar.residual import Stage2Config, train_residual
from spar.weighting import WeightingConfig

env = make_env("bimodal-bandit")
ds = generate_dataset(env, "mixture-expert", 20_000, seed=0)
bundle = train_stage1(ds, Stage1Config(steps=3000, hidden=(64, 64)))

geo = residual_geometry_summary(ds, bundle.base_policy)
print(f"residual modes: {geo['mode_count_estimate']}, "
      f"fractions {[round(f, 3) for f in geo['cluster_fractions']]}")

base = evaluate_policy(env, bundle, None, ALWAYS_REJECT, 3000, seed=1000)
print(f"anchor regret {base.regret:.4f}")
w = WeightingConfig("exponential", "hard", 0.3)
for variant in ("mlp", "proj"):
    cfg = Stage2Config(variant=variant, steps=2000, hidden=(64, 64),
                       cvae_hidden=(64, 64, 64), K=32, weighting=w)
    pol = train_residual(bundle, ds, cfg)
    r = evaluate_policy(env, bundle, pol, GateConfig(), 3000, seed=1000)
    print(f"{variant:>5}: regret {r.regret:.4f}  accept rate {r.accept_rate:.2f}")
