"""The twelve acceptance criteria, each at its stated tolerance.

A one-line PASS/FAIL summary per criterion is printed at the end of the run.
The desk-preset training runs are shared between criteria through the
``desk_runs`` fixture.
"""

import filecmp
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import norm

from helpers import directional_check, small_cfg
from spar import io, pipeline, theory
from spar.anchor import (AnchorBundle, BasePolicy, CriticEnsemble, critic_loss_and_grad,
                         default_subsets, q_rob, value_loss_and_grad, with_lambda_u)
from spar.diagnostics import target_update_probe
from spar.envs import generate_dataset, make_env, residual_stats
from spar.gate import ALWAYS_REJECT, GateConfig, evaluate_policy
from spar.nn import GraphEnsemble, ParamGraph, Trainable, make_rng, mlp_spec
from spar.residual import (MlpTrainer, PlasTrainer, ProjTrainer, ResidualCvae,
                           cvae_loss_and_grads, make_trainer, self_imitation_loss)
from spar.weighting import WeightingConfig, candidate_weights

SEEDS = (0, 42, 123)


# ---------------------------------------------------------------- 1

def _fd_cases(small_world):
    env, ds, bundle, s2 = small_world
    rng = make_rng(11)
    n = 8
    idx = make_rng(12).integers(0, len(ds), size=n)
    s_norm = ds.normalize(ds.states[idx])
    a = ds.actions[idx]
    cases = {}

    def plain(sizes, acts, tag):
        g = ParamGraph.init(sizes, acts, rng)
        x = rng.normal(size=(n, sizes[0]))
        up = rng.normal(size=(n, sizes[-1]))
        gp, gx = g.backward(x, up)
        f_p = lambda p: np.sum(up * ParamGraph(sizes, acts, p).forward(x))
        f_x = lambda z: np.sum(up * g.forward(z.reshape(x.shape)))
        cases[f"{tag} params"] = (f_p, g.params.copy(), gp)
        cases[f"{tag} inputs"] = (f_x, x.ravel(), gx.ravel())

    plain(*mlp_spec(5, (16, 16), 3), "relu mlp")
    plain([3, 8, 2], ["tanh", "identity"], "tanh mlp")
    plain(*mlp_spec(4, (8,), 2, activation="tanh", out_activation="tanh"), "tanh-out mlp")

    sizes, acts = mlp_spec(6, (16, 16), 1)
    ens = GraphEnsemble.init(4, sizes, acts, rng)
    x = rng.normal(size=(n, 6))
    y = rng.normal(size=n)
    _, g, _ = critic_loss_and_grad(ens, x, y, 0.7)
    cases["critic ensemble"] = (
        lambda p: critic_loss_and_grad(GraphEnsemble(sizes, acts, p), x, y, 0.7)[0].sum(),
        ens.params.copy(), g)

    vs, va = mlp_spec(2, (16, 16), 1)
    vnet = ParamGraph.init(vs, va, rng)
    q = rng.normal(size=n)
    _, g = value_loss_and_grad(vnet, s_norm, q, 0.7)
    cases["state value"] = (
        lambda p: value_loss_and_grad(ParamGraph(vs, va, p), s_norm, q, 0.7)[0],
        vnet.params.copy(), g)

    for kind in ("deterministic", "gaussian"):
        pol = BasePolicy.create(2, 2, (16, 16), kind, ds.state_mean, ds.state_std, rng)
        _, g = pol.bc_loss_and_grad(s_norm, a)
        mk = lambda p, pol=pol: BasePolicy(ParamGraph(pol.net.layer_sizes,
                                                      pol.net.activations, p),
                                           pol.kind, pol.state_mean, pol.state_std)
        cases[f"anchor {kind}"] = (lambda p, mk=mk: mk(p).bc_loss_and_grad(s_norm, a)[0],
                                   pol.net.params.copy(), g)

    s_raw = ds.states[idx]
    _, g_a = bundle.lcb_and_action_grad(s_raw, a, "guide")
    cases["lcb action gradient"] = (
        lambda z: q_rob(bundle, s_raw, z.reshape(a.shape), "guide").lcb.sum(),
        a.ravel().copy(), g_a.ravel())

    mlp = MlpTrainer(bundle, ds, replace(s2, variant="mlp", lambda_g=2.0))
    ib = np.arange(n)
    _, g = mlp.fit_loss_and_grad(ib)
    cases["residual mlp fit"] = (lambda p: mlp.fit_loss_and_grad(ib, params=p)[0],
                                 mlp.theta.copy(), g)
    _, g = mlp.guide_loss_and_grad(ib)
    cases["residual mlp guide"] = (lambda p: mlp.guide_loss_and_grad(ib, params=p)[0],
                                   mlp.theta.copy(), g)

    model = ResidualCvae.create(2, 2, (16, 16, 16), 4, rng)
    eps = rng.normal(size=(n, 4))
    delta = rng.normal(scale=0.2, size=(n, 2))
    w = rng.uniform(0.0, 2.0, n)
    a_base = bundle.base_action(s_raw)
    _, g_enc, g_dec = cvae_loss_and_grads(model, s_norm, a_base, delta, w, eps)

    def elbo_enc(p):
        m = model.copy()
        m.encoder.params[...] = p
        return cvae_loss_and_grads(m, s_norm, a_base, delta, w, eps)[0]["total"]

    cases["cvae encoder"] = (elbo_enc, model.encoder.params.copy(), g_enc)
    cases["cvae decoder"] = (
        lambda p: cvae_loss_and_grads(model, s_norm, a_base, delta, w, eps,
                                      dec_params=p)[0]["total"],
        model.decoder.params.copy(), g_dec)

    proj = ProjTrainer(bundle, ds, replace(s2, variant="proj"))
    proj.run(4)
    ig = np.arange(8)
    _, g = proj.guide_loss_and_grad(ig, rng=make_rng(5))
    cases["self-imitation decoder"] = (
        lambda p: proj.guide_loss_and_grad(ig, params=p, rng=make_rng(5))[0],
        proj.theta.copy(), g)

    plas = PlasTrainer(bundle, ds, replace(s2, variant="plas", steps=20))
    plas.pretrain()
    # move the latent head off its zero init so every layer carries gradient
    plas.actor.latent.params[...] = ParamGraph.init(plas.actor.latent.layer_sizes,
                                                    plas.actor.latent.activations,
                                                    rng).params
    _, g = plas.fit_loss_and_grad(ib)
    cases["plas latent fit"] = (lambda p: plas.fit_loss_and_grad(ib, params=p)[0],
                                plas.theta.copy(), g)
    _, g = plas.guide_loss_and_grad(ib)
    cases["plas latent guide"] = (lambda p: plas.guide_loss_and_grad(ib, params=p)[0],
                                  plas.theta.copy(), g)
    return cases


def test_criterion_01_gradient_correctness(small_world, record):
    t0 = time.perf_counter()
    cases = _fd_cases(small_world)
    errs = {}
    for i, (name, (f, x, g)) in enumerate(cases.items()):
        errs[name], _, _, _ = directional_check(f, x, g, n_probes=32, seed=100 + i)
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    record(1, f"{len(errs)} architectures, worst rel err {errs[worst]:.2e} "
              f"({worst}), {dt:.1f}s")
    assert all(e <= 1e-4 for e in errs.values()), errs
    assert dt < 60.0


# ---------------------------------------------------------------- 2

def _normal_expectile(tau):
    """tau-expectile of N(0, 1): tau E(Y-e)+ = (1-tau) E(e-Y)+."""
    def gap(e):
        upper = norm.pdf(e) - e * norm.sf(e)
        lower = e * norm.cdf(e) + norm.pdf(e)
        return tau * upper - (1.0 - tau) * lower
    return brentq(gap, -5.0, 5.0, xtol=1e-14)


def _regression_target(x):
    return 1.0 + 0.5 * x[:, 0] * x[:, 2] - 0.3 * x[:, 3] ** 2 + 0.2 * np.sin(2.0 * x[:, 1])


def _fit_expectile(tau, sigma=0.2, n=50_000, seed=0):
    rng = make_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 4))
    y = _regression_target(x) + sigma * rng.normal(size=n)
    sizes, acts = mlp_spec(4, (64, 64), 1)
    ens = GraphEnsemble.init(4, sizes, acts, rng)
    opt = Trainable(ens, lr=1e-3)
    for step in range(4000):
        if step == 3000:
            opt.opt = replace(opt.opt, learning_rate=1e-4)
        idx = rng.integers(0, n, size=256)
        _, g, _ = critic_loss_and_grad(ens, x[idx], y[idx], tau)
        opt.apply(g)
    x_test = make_rng(seed + 1).uniform(-1.0, 1.0, size=(10_000, 4))
    oracle = _regression_target(x_test) + sigma * _normal_expectile(tau)
    pred = ens.forward(x_test)[..., 0]
    scale = np.sqrt(np.mean(oracle ** 2))
    member = np.sqrt(np.mean((pred - oracle) ** 2, axis=1)) / scale
    mean = np.sqrt(np.mean((pred.mean(axis=0) - oracle) ** 2)) / scale
    return float(mean), member


def test_criterion_02_expectile_sanity(record):
    assert _normal_expectile(0.5) == pytest.approx(0.0, abs=1e-12)
    r50, m50 = _fit_expectile(0.5)
    r90, m90 = _fit_expectile(0.9)
    record(2, f"relative RMSE tau=0.5 {r50:.2%} (members <= {m50.max():.2%}), "
              f"tau=0.9 {r90:.2%} (members <= {m90.max():.2%})")
    assert r50 <= 0.02
    assert r90 <= 0.03


# ---------------------------------------------------------------- 3

def test_criterion_03_lcb_invariant(small_world, record):
    _, _, bundle, _ = small_world
    rng = make_rng(3)
    s = rng.uniform(-1.0, 1.0, size=(10_000, 2))
    a = rng.uniform(-1.0, 1.0, size=(10_000, 2))
    stats = {}
    for subset in ("data", "guide", "rect", "all"):
        r = q_rob(bundle, s, a, subset)
        spread = r.std > 0
        stats[subset] = (bool(np.all(r.lcb <= r.mean)),
                         bool(np.all(r.lcb[spread] < r.mean[spread])),
                         bool(np.all(r.lcb[~spread] == r.mean[~spread])))
    zero = q_rob(with_lambda_u(bundle, 0.0), s, a)
    members = bundle.critics.members
    same = GraphEnsemble(members.layer_sizes, members.activations,
                         np.repeat(members.params[:1], len(members), axis=0))
    flat = AnchorBundle(bundle.base_policy, CriticEnsemble(same, default_subsets()),
                        bundle.value_net, 0.5, bundle.state_mean, bundle.state_std)
    r_flat = q_rob(flat, s, a)
    ok = (all(all(v) for v in stats.values()) and np.array_equal(zero.lcb, zero.mean)
          and np.all(r_flat.std == 0) and np.array_equal(r_flat.lcb, r_flat.mean))
    record(3, f"1e4 pairs x 4 subsets: lcb <= mean, strict iff spread; "
              f"lambda_u=0 and identical critics give equality: {ok}")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_self_imitation_minimizer(record):
    rng = make_rng(4)
    worst = 0.0
    for i in range(100):
        K = (2, 4, 8)[i % 3]
        n, d = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        delta = rng.normal(size=(n, K, d))
        adv = rng.normal(scale=2.0, size=(n, K))
        omega = candidate_weights(WeightingConfig(), adv)
        pred = rng.normal(size=(n, 1, d))
        lr = 0.25 * n
        for _ in range(200):
            _, g = self_imitation_loss(pred, delta, omega)
            pred = pred - lr * g
        target = np.sum(omega[..., None] * delta, axis=1, keepdims=True)
        worst = max(worst, float(np.max(np.abs(pred - target))))
    record(4, f"100 instances, K in (2, 4, 8): max |pred - sum omega delta| = {worst:.1e}")
    assert worst <= 1e-6


# ---------------------------------------------------------------- 5

def test_criterion_05_chord_versus_gradient_drift(record):
    t0 = time.perf_counter()
    r = theory.verify_drift(theory.Circle(1.0), min_normal=0.7)
    dt = time.perf_counter() - t0
    c = np.asarray(r["chord_lengths"])
    ok_bound = bool(np.all(r["chord_drift"][c <= 0.2] <= r["chord_bound"][c <= 0.2] * 1.05))
    exact = 1.0 - np.sqrt(1.0 - 0.2 ** 2 / 4.0)
    record(5, f"chord slope {r['chord_slope']:.3f}, gradient slope {r['grad_slope']:.3f}, "
              f"drift(c=0.2) {r['chord_drift'][0]:.4e}, {dt:.2f}s")
    assert r["chord_drift"][0] == pytest.approx(exact, rel=1e-9)
    assert ok_bound
    assert 1.9 <= r["chord_slope"] <= 2.1
    assert 0.9 <= r["grad_slope"] <= 1.1
    assert dt < 10.0


# ---------------------------------------------------------------- 6

def test_criterion_06_localization_bias(desk_runs, record):
    parts = []
    ok = True
    for env_name, variant in (("unimodal-quad", "mlp"), ("bimodal-bandit", "proj")):
        cfg, _ = desk_runs.get(env_name, variant)
        env = make_env(env_name)
        bundle, _, ds = pipeline.load_run(cfg, cfg.seeds[0])
        delta = residual_stats(ds, bundle.base_policy)["delta_rho"]
        r = theory.verify_localization_bias(env, bundle.base_policy, delta, ds,
                                            n_states=500)
        ok &= r["holds"] and len(r["bound"]) == 500
        parts.append(f"{env_name} max excess {r['max_violation']:.1e} "
                     f"(tol {r['tolerance']:.3f})")
    c = theory.constructed_bias_case(delta_rho=0.5, excess=0.3, L=1.0)
    ok &= c["bound"] == pytest.approx(0.3) and c["holds"]
    parts.append(f"constructed eps_loc {c['eps_loc_measured']:.4f} vs 0.3 + {c['tolerance']:.4f}")
    record(6, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_07_cover_identification(record):
    t0 = time.perf_counter()
    res = {d: theory.verify_sample_complexity(d=d, beta=0.1, trials=200, seed=0)
           for d in (1, 2)}
    dt = time.perf_counter() - t0
    rows = theory.theory_checks("complexity", {f"d{d}": r for d, r in res.items()})
    msg = ", ".join(f"d={d}: fail {r['failure_global']:.3f}/{r['failure_res']:.3f}, "
                    f"ratio {r['ratio']:.2f} vs {r['predicted_ratio']:.2f}"
                    for d, r in res.items())
    record(7, f"{msg}, {dt:.1f}s")
    assert all(ok for _, ok in rows), rows
    assert res[2]["ratio"] > res[1]["ratio"]
    assert dt < 120.0


# ---------------------------------------------------------------- 8 and 9

def _ridge(desk_runs):
    out = {}
    for variant in ("proj", "mlp", "plas"):
        cfg, summary = desk_runs.get("narrow-ridge", variant)
        out[variant] = (cfg, summary)
    return out


def _per_seed(summary, key):
    return np.array([summary[f"seed.{s}.{key}"] for s in SEEDS])


def test_criterion_08_gradient_conflict(desk_runs, record):
    runs = _ridge(desk_runs)
    dd = {v: _per_seed(s, "dd_mean").mean() for v, (_, s) in runs.items()}
    vsd = {v: _per_seed(s, "vsd_mean").mean() for v, (_, s) in runs.items()}

    cfg, _ = runs["proj"]
    bundle, _, ds = pipeline.load_run(cfg, cfg.seeds[0])
    tr = make_trainer(bundle, ds, replace(cfg.stage2, seed=cfg.seeds[0]))
    tr.run(2 * cfg.stage2.projection_period)
    target_change, online_change = target_update_probe(tr, seed=1)

    record(8, "DD " + ", ".join(f"{v} {x:.2e}" for v, x in dd.items())
           + "; VSD " + ", ".join(f"{v} {x:.2e}" for v, x in vsd.items())
           + f"; target change {target_change:g} (online {online_change:.1e})")
    assert dd["proj"] <= dd["mlp"] / 10 and dd["proj"] <= dd["plas"] / 10
    assert vsd["proj"] <= vsd["mlp"] / 10 and vsd["proj"] <= vsd["plas"] / 10
    assert target_change == 0.0 and online_change > 0.0


def test_criterion_09_support_ratio(desk_runs, record):
    runs = _ridge(desk_runs)
    proj = _per_seed(runs["proj"][1], "support_ratio_q95")
    plas = _per_seed(runs["plas"][1], "support_ratio_q95")
    record(9, f"q95 ratio PROJ {np.round(proj, 3).tolist()} (max {proj.max():.3f}), "
              f"PLAS {np.round(plas, 2).tolist()} (min {plas.min():.2f})")
    assert np.all(proj <= 1.2)
    assert np.all(plas >= 1.5)


# ---------------------------------------------------------------- 10

def test_criterion_10_end_to_end(desk_runs, record):
    _, uq = desk_runs.get("unimodal-quad", "mlp")
    _, bp = desk_runs.get("bimodal-bandit", "proj")
    _, bm = desk_runs.get("bimodal-bandit", "mlp")
    _, mp = desk_runs.get("branch-maze", "proj")
    _, ml = desk_runs.get("branch-maze", "plas")
    used = [("unimodal-quad", "mlp"), ("bimodal-bandit", "proj"), ("bimodal-bandit", "mlp"),
            ("branch-maze", "proj"), ("branch-maze", "plas")]
    minutes = sum(desk_runs.times[k] for k in used) / 60.0

    closed = 1.0 - uq["regret.mean"] / uq["base_regret.mean"]
    ratio = bp["regret.mean"] / bm["regret.mean"]
    record(10, f"unimodal gap closed {closed:.1%}; bimodal regret PROJ/MLP {ratio:.3f}; "
               f"maze success PROJ {mp['score.mean']:.3f}, base {mp['base_score.mean']:.3f}, "
               f"PLAS {ml['score.mean']:.3f}; {minutes:.1f} min")
    assert closed >= 0.30
    assert ratio <= 0.5
    assert mp["score.mean"] >= mp["base_score.mean"]
    assert mp["score.mean"] >= ml["score.mean"]
    assert minutes <= 30.0


# ---------------------------------------------------------------- 11

def test_criterion_11_gate_thresholds(desk_runs, record):
    cfg, _ = desk_runs.get("unimodal-quad", "mlp")
    env = make_env(cfg.env)
    default = cfg.gate
    cells = [(a, r) for a in (-1e9, default.eta_abs, 1e9) for r in (-1e9, default.eta_rel, 1e9)]
    scores = {c: [] for c in cells}
    reject_matches_base = True
    for seed in SEEDS:
        bundle, policy, _ = pipeline.load_run(cfg, seed)
        ev_seed = seed + cfg.eval_seed_offset
        base = evaluate_policy(env, bundle, None, ALWAYS_REJECT, cfg.eval_episodes, ev_seed)
        for a, r in cells:
            g = replace(default, eta_abs=a, eta_rel=r)
            res = evaluate_policy(env, bundle, policy, g, cfg.eval_episodes, ev_seed)
            scores[(a, r)].append(res.mean_return)
            if (a, r) == (1e9, 1e9):
                reject_matches_base &= res.mean_return == base.mean_return
    mean = {c: float(np.mean(v)) for c, v in scores.items()}
    dflt = mean[(default.eta_abs, default.eta_rel)]
    others = {c: m for c, m in mean.items() if c != (default.eta_abs, default.eta_rel)}
    worst_gap = min(dflt - m for m in others.values())
    record(11, f"always-reject == base: {reject_matches_base}; default mean return "
               f"{dflt:.5f}, smallest margin over a degenerate cell {worst_gap:+.2e}")
    assert reject_matches_base
    assert all(dflt >= m for m in others.values()), mean


# ---------------------------------------------------------------- 12

def _tree(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_criterion_12_determinism_and_persistence(tmp_path, record):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        for variant in ("mlp", "proj", "plas"):
            pipeline.run_pipeline(small_cfg(d, variant, tag=variant))
    files = _tree(dirs[0])
    same_list = files == _tree(dirs[1])
    mismatch = [str(f) for f in files
                if not filecmp.cmp(dirs[0] / f, dirs[1] / f, shallow=False)]

    trips = []
    ds = generate_dataset(make_env("narrow-ridge"), "medium", 1000, 9)
    blob = io.encode_dataset(ds)
    trips.append(io.encode_dataset(io.decode_dataset(blob)) == blob)
    cfg = small_cfg(dirs[0], "proj", tag="proj")
    ckpt = pipeline.seed_dir(cfg, 0) / "stage1.ckpt"
    b1 = io.load_bundle(ckpt)
    entries, meta = io.bundle_entries(b1)
    trips.append(io.encode_checkpoint(entries, meta) == ckpt.read_bytes())
    for variant in ("mlp", "proj", "plas"):
        path = pipeline.seed_dir(cfg, 0) / variant / "stage2.ckpt"
        pol = io.load_policy(path)
        e, m = io.policy_entries(pol, {"variant": variant})
        trips.append(io.encode_checkpoint(e, m) == path.read_bytes())
        ev = pipeline.seed_dir(cfg, 0) / variant / "eval.bin"
        recs, summ = io.load_eval_records(ev)
        trips.append(io.encode_eval_records(recs, summ) == ev.read_bytes())
    record(12, f"{len(files)} files byte-identical across reruns: "
               f"{same_list and not mismatch}; {sum(trips)}/{len(trips)} binary round trips exact")
    assert same_list and not mismatch, mismatch
    assert all(trips)
