"""Numerical checks of the three guarantees behind residual correction.

1. Sample complexity: identifying an eps-optimal action inside a ball of
   radius delta around the anchor needs fewer samples than searching the whole
   action box, by roughly (D / 2 delta)^d.
2. Localization bias: restricting the search to that ball costs at most
   L times the distance by which the true optimum lies outside it.
3. Curvature drift: on a curved data manifold a straight chord leaves the
   manifold quadratically in its length, a gradient step only linearly.

    python3 demos/04_theory_checks.py
"""

from spar import theory

for d in (1, 2):
    res = theory.verify_sample_complexity(d=d, trials=100)
    print(f"d={d}: samples global {res['n_global']}, local {res['n_res']}, "
          f"ratio {res['ratio']:.2f} (predicted {res['predicted_ratio']:.2f}), "
          f"failures {res['failure_global']:.2f} / {res['failure_res']:.2f}")

case = theory.constructed_bias_case(delta_rho=0.5, excess=0.3)
print(f"bias with optimum 0.3 outside the ball: {case['eps_loc_measured']:.4f} "
      f"(bound {case['bound']:.4f}, grid tolerance {case['tolerance']:.4f})")

for m in (theory.Circle(1.0), theory.SineCurve()):
    r = theory.verify_drift(m, min_normal=0.7)
    name = type(m).__name__
    print(f"{name}: chord slope {r['chord_slope']:.3f}, gradient slope {r['grad_slope']:.3f}")
    for check, ok in theory.theory_checks("drift", {name: r}):
        print(f"  {check}: {'ok' if ok else 'FAILED'}")
