"""Fit an anchor on a noisy logged controller, then learn a gated residual.

The task is a one-step quadratic bandit. The logged policy is biased and
noisy, so behavior cloning inherits its regret; the residual stage learns a
small correction around the anchor and the gate only accepts corrections the
pessimistic critic scores above the anchor.

    python3 demos/01_unimodal_correction.py
"""

from spar.anchor import Stage1Config, train_stage1
from spar.envs import generate_dataset, make_env
from spar.gate import ALWAYS_ACCEPT, ALWAYS_REJECT, GateConfig, evaluate_policy
from spar.residual import Stage2Config, train_residual
from spar.weighting import WeightingConfig

env = make_env("unimodal-quad")
ds = generate_dataset(env, "medium", 20_000, seed=0)
print(f"dataset: {len(ds)} transitions, mean reward {ds.rewards.mean():.4f}")

bundle = train_stage1(ds, Stage1Config(steps=3000, hidden=(64, 64)))
s2 = Stage2Config(variant="mlp", steps=2000, hidden=(64, 64),
                  weighting=WeightingConfig("exponential", "hard", 1.0))
policy = train_residual(bundle, ds, s2)

for name, pol, gate in (("anchor only", None, ALWAYS_REJECT),
                        ("always accept", policy, ALWAYS_ACCEPT),
                        ("gated", policy, GateConfig())):
    r = evaluate_policy(env, bundle, pol, gate, episodes=3000, seed=1000)
    print(f"{name:>14}: regret {r.regret:.4f}  accept rate {r.accept_rate:.2f}")
