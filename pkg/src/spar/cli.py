"""Command line entry point: ``python3 -m spar <command> ...``.

Every config key is also a flag (``--stage2.lambda_g 2``). Precedence, last
wins: task preset, ``--config`` file, ``--set key=value``, key flags, then
``SPAR_OUT`` for the output directory. Failures exit nonzero and print the
stage tag.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io, pipeline, theory
from .anchor import with_lambda_u
from .diagnostics import (measure_conflict, policy_actions, residual_geometry_summary,
                          support_distance_ratio)
from .envs import ENV_NAMES, make_env, residual_stats
from .gate import ALWAYS_REJECT
from .nn import make_rng
from .pipeline import StageError, run_stage
from .residual import PlasTrainer, make_trainer, phase2_steps

EXIT_CODES = {stage: 2 + i for i, stage in enumerate(pipeline.STAGES)}

_UNSET = object()


def _key_dest(key):
    return "key__" + key.replace(".", "__")


def _add_config_args(p):
    p.add_argument("--env", choices=ENV_NAMES, default=None)
    p.add_argument("--full", action="store_true",
                   help="full-scale budgets instead of the desk preset")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, action="append", default=None,
                   help="restrict to these seeds (repeatable)")
    keys = p.add_argument_group("config keys")
    for key in cfgmod.known_keys():
        if key == "env":
            continue
        keys.add_argument(f"--{key}", dest=_key_dest(key), default=_UNSET,
                          metavar="V")


def resolve_config(args) -> cfgmod.RunConfig:
    flat = cfgmod.parse_text(Path(args.config).read_text()) if args.config else {}
    for item in args.set:
        k, v = cfgmod.parse_override(item)
        flat[k] = v
    for key in cfgmod.known_keys():
        raw = getattr(args, _key_dest(key), _UNSET)
        if raw is not _UNSET:
            flat[key] = cfgmod.parse_override(f"{key}={raw}")[1]
    env = args.env or flat.get("env", "unimodal-quad")
    desk = not args.full if "desk_scale" not in flat else flat["desk_scale"]
    base = cfgmod.preset(env, desk_scale=desk,
                         variant=flat.get("stage2.variant"))
    cfg = cfgmod.from_flat(flat, base)
    if args.env:
        cfg = replace(cfg, env=args.env)
    if args.seed:
        cfg = replace(cfg, seeds=tuple(args.seed))
    return pipeline.resolve_output_dir(cfg)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(type(x).__name__)


def _kv_clean(d: dict) -> dict:
    return json.loads(json.dumps(d, default=_jsonable))


def _require(path: Path, what: str):
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run the earlier stage first")
    return path


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, args):
    env = make_env(cfg.env)
    for seed in cfg.seeds:
        path = pipeline.seed_dir(cfg, seed) / "dataset.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        ds = run_stage("gen-data", seed, pipeline.obtain_dataset, cfg, env, seed, path)
        _emit({"seed": seed, "path": str(path), "n": len(ds)})


def _dataset(cfg, seed):
    path = _require(pipeline.seed_dir(cfg, seed) / "dataset.bin", "dataset")
    return io.load_dataset(path)


def cmd_train_stage1(cfg, args):
    for seed in cfg.seeds:
        sd = pipeline.seed_dir(cfg, seed)
        ds = run_stage("stage1", seed, _dataset, cfg, seed)
        run_stage("stage1", seed, pipeline.obtain_bundle, cfg, ds, seed,
                  sd / "stage1.ckpt", sd / "stage1_metrics.jsonl")
        _emit({"seed": seed, "path": str(sd / "stage1.ckpt")})


def _bundle(cfg, seed):
    path = _require(pipeline.seed_dir(cfg, seed) / "stage1.ckpt", "Stage I checkpoint")
    return with_lambda_u(io.load_bundle(path), cfg.stage1.lambda_u)


def cmd_train_stage2(cfg, args):
    env = make_env(cfg.env)
    for seed in cfg.seeds:
        rd = pipeline.run_dir(cfg, seed)
        rd.mkdir(parents=True, exist_ok=True)

        def go():
            ds, bundle = _dataset(cfg, seed), _bundle(cfg, seed)
            with pipeline.MetricsLog(rd / "metrics.jsonl", cfg.wallclock) as log:
                policy, conflicts = pipeline.train_stage2(cfg, env, bundle, ds, seed, log)
            io.save_policy(rd / "stage2.ckpt", policy, {"variant": cfg.stage2.variant})
            return conflicts

        run_stage("stage2", seed, go)
        _emit({"seed": seed, "path": str(rd / "stage2.ckpt")})


def cmd_eval(cfg, args):
    env = make_env(cfg.env)
    per_seed = {}
    for seed in cfg.seeds:
        def go():
            bundle = _bundle(cfg, seed)
            policy = None
            if not args.base_only:
                policy = io.load_policy(_require(pipeline.run_dir(cfg, seed) / "stage2.ckpt",
                                                 "Stage II checkpoint"))
            gate = ALWAYS_REJECT if args.base_only else cfg.gate
            r = pipeline._eval(cfg, env, bundle, policy, gate, seed, keep=True)
            res = {"score": pipeline._score(r), "regret": r.regret,
                   "accept_rate": r.accept_rate, "mean_return": r.mean_return}
            rd = pipeline.run_dir(cfg, seed)
            rd.mkdir(parents=True, exist_ok=True)
            name = "eval_base.bin" if args.base_only else "eval.bin"
            io.save_eval_records(rd / name, r.records, res)
            return res

        per_seed[seed] = run_stage("eval", seed, go)
        _emit({"seed": seed, **per_seed[seed]})
    summary = pipeline.summarize(cfg, per_seed)
    name = "eval_base" if args.base_only else f"eval_{cfg.run_name}"
    pipeline.write_kv(Path(cfg.output_dir) / f"{name}.txt", summary)


def _histogram(values, bins=30):
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return {"hist_counts": counts.tolist(), "hist_edges": edges.tolist()}


def cmd_diagnose(cfg, args):
    what = args.what
    for seed in cfg.seeds:
        def go():
            ds, bundle = _dataset(cfg, seed), _bundle(cfg, seed)
            if what == "geometry":
                geo = residual_geometry_summary(ds, bundle.base_policy, seed=seed)
                st = residual_stats(ds, bundle.base_policy)
                out = {**geo, "delta_rho": st["delta_rho"], "D_A": st["D_A"],
                       **_histogram(st["residual_magnitudes"])}
                out["magnitude_quantiles"] = {str(k): v for k, v in
                                              geo["magnitude_quantiles"].items()}
                return pipeline.seed_dir(cfg, seed) / "geometry.txt", out
            rd = pipeline.run_dir(cfg, seed)
            rd.mkdir(parents=True, exist_ok=True)
            if what == "support":
                policy = io.load_policy(_require(rd / "stage2.ckpt", "Stage II checkpoint"))
                rng = make_rng(seed + 5)
                states = ds.states[rng.choice(len(ds), min(1000, len(ds)), replace=False)]
                rep = support_distance_ratio(
                    ds, policy_actions(bundle, policy, states, make_rng(seed + 9)))
                return rd / "support.txt", {
                    "ratio_q95": rep.ratio_q95, "k": rep.k, "boundary": rep.boundary,
                    "probe_q95": rep.probe_q95, "n_probe": rep.n_probe,
                    **_histogram(rep.probe_distances)}
            # conflict: retrain to the halfway point, then probe
            s2 = replace(cfg.stage2, seed=seed)
            tr = make_trainer(bundle, ds, s2)
            if isinstance(tr, PlasTrainer):
                tr.pretrain()
            tr.run(phase2_steps(s2) // 2)
            reps = [measure_conflict(tr, seed=seed * 1000 + i)
                    for i in range(max(1, cfg.conflict_batches))]
            dd = [r.dd for r in reps]
            vsd = [r.vsd for r in reps]
            return rd / "conflict.txt", {
                "variant": cfg.stage2.variant, "step": tr.step_count,
                "dd_mean": float(np.mean(dd)), "vsd_mean": float(np.mean(vsd)),
                "dd": dd, "vsd": vsd}

        path, out = run_stage("diagnose", seed, go)
        pipeline.write_kv(path, _kv_clean(out))
        _emit({"seed": seed, "path": str(path)})


def _theory(cfg, what, seed):
    if what == "complexity":
        return {f"d{d}": theory.verify_sample_complexity(d=d, seed=seed) for d in (1, 2)}
    if what == "drift":
        return {"circle": theory.verify_drift(theory.Circle(1.0), seed=seed,
                                              min_normal=0.7),
                "sine": theory.verify_drift(theory.SineCurve(), seed=seed,
                                            min_normal=0.7)}
    if what == "bias":
        env = make_env(cfg.env)
        if env.d_a != 2 or not np.isfinite(env.lipschitz_L):
            raise ValueError(f"{cfg.env} has no finite Lipschitz oracle over 2-D actions")
        ds, bundle = _dataset(cfg, seed), _bundle(cfg, seed)
        delta = residual_stats(ds, bundle.base_policy)["delta_rho"]
        res = theory.verify_localization_bias(env, bundle.base_policy, delta, ds, seed=seed)
        res = {k: v for k, v in res.items() if not isinstance(v, np.ndarray)}
        return {"probes": res, "delta_rho": delta,
                "constructed": theory.constructed_bias_case()}
    raise ValueError(f"unknown theory check {what!r}")


def cmd_verify_theory(cfg, args):
    seed = cfg.seeds[0]
    out = run_stage("verify-theory", None, _theory, cfg, args.what, seed)
    checks = theory.theory_checks(args.what, out)
    flat = {f"check.{name}": bool(ok) for name, ok in checks}

    def walk(prefix, v):
        if isinstance(v, dict):
            for k, x in v.items():
                walk(f"{prefix}.{k}" if prefix else str(k), x)
        else:
            flat[prefix] = v

    walk("", _kv_clean(out))
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    pipeline.write_kv(root / f"theory_{args.what}.txt", flat)
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {args.what}: {name}")
    if not all(ok for _, ok in checks):
        raise StageError("verify-theory", None,
                         RuntimeError(f"{args.what} checks failed"))


def cmd_ablate(cfg, args):
    rows = run_stage("ablate", None, pipeline.ablation_grid, cfg, args.axis)
    sys.stdout.write(pipeline.format_table(args.axis, rows))


def cmd_run_all(cfg, args):
    try:
        summary = pipeline.run_pipeline(cfg)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - config-level failure
        raise StageError("config", None, e) from e
    _emit({k: v for k, v in summary.items() if not k.startswith("seed.")})
    for what in ("complexity", "drift") + (("bias",) if cfg.env in
                                            ("unimodal-quad", "bimodal-bandit") else ()):
        args.what = what
        cmd_verify_theory(cfg, args)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the offline dataset"),
    "train-stage1": (cmd_train_stage1, "fit the anchor policy and critics"),
    "train-stage2": (cmd_train_stage2, "fit the residual policy"),
    "eval": (cmd_eval, "gated evaluation of a trained run"),
    "diagnose": (cmd_diagnose, "conflict, support or geometry diagnostics"),
    "verify-theory": (cmd_verify_theory, "numerical checks of the guarantees"),
    "ablate": (cmd_ablate, "one ablation axis over all seeds"),
    "run-all": (cmd_run_all, "every stage for every seed plus theory checks"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="spar", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        if name == "diagnose":
            p.add_argument("what", choices=("conflict", "support", "geometry"))
        elif name == "verify-theory":
            p.add_argument("what", choices=("complexity", "bias", "drift"))
        elif name == "ablate":
            p.add_argument("--axis", required=True, choices=pipeline.ABLATION_AXES)
        elif name == "eval":
            p.add_argument("--base-only", action="store_true",
                           help="score the anchor policy alone")
            p.add_argument("--eta-abs", dest=_key_dest("gate.eta_abs"), default=_UNSET,
                           metavar="V", help="alias of --gate.eta_abs")
            p.add_argument("--eta-rel", dest=_key_dest("gate.eta_rel"), default=_UNSET,
                           metavar="V", help="alias of --gate.eta_rel")
        _add_config_args(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = resolve_config(args)
        except (cfgmod.ConfigError, OSError) as e:
            raise StageError("config", None, e) from e
        COMMANDS[args.command][0](cfg, args)
    except StageError as e:
        print(f"spar: error {e}", file=sys.stderr)
        return EXIT_CODES.get(e.stage, 1)
    return 0
