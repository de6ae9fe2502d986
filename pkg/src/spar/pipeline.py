"""End-to-end runs: data, Stage I, Stage II with periodic evaluation, final
gated evaluation, diagnostics and a cross-seed summary.

Output layout under ``output_dir``::

    seed_<s>/dataset.bin               shared by every run on that seed
    seed_<s>/stage1.ckpt               reused when its config key matches
    seed_<s>/stage1_metrics.jsonl
    seed_<s>/<run>/stage2.ckpt         <run> is the tag, or the variant
    seed_<s>/<run>/metrics.jsonl
    seed_<s>/<run>/eval.bin
    seed_<s>/<run>/diagnostics.txt
    summary_<run>.txt
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io
from .anchor import train_stage1, with_lambda_u
from .config import RunConfig
from .diagnostics import (measure_conflict, policy_actions, residual_geometry_summary,
                          support_distance_ratio)
from .envs import generate_dataset, make_env
from .gate import ALWAYS_REJECT, GateConfig, evaluate_policy
from .nn import make_rng
from .residual import PlasTrainer, make_trainer, phase2_steps

STAGES = ("config", "gen-data", "stage1", "stage2", "eval", "diagnose",
          "verify-theory", "ablate")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and seed."""

    def __init__(self, stage, seed, cause):
        self.stage = stage
        self.seed = seed
        where = f"seed {seed}: " if seed is not None else ""
        super().__init__(f"[{stage}] {where}{type(cause).__name__}: {cause}")


def run_stage(stage, seed, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(stage, seed, e) from e


# ---------------------------------------------------------------- metrics log

class MetricsLog:
    """Append-only JSON-lines file.

    Every row is flushed as one line, so a crash can only leave a partial
    last line; reopening with ``resume=True`` drops it and continues.
    """

    def __init__(self, path, wallclock=False, resume=False):
        self.path = Path(path)
        self.wallclock = wallclock
        self._t0 = time.perf_counter()
        self._last = {}
        rows = self.read(self.path) if resume and self.path.exists() else []
        with open(self.path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(self._line(row))
        for row in rows:
            self._last[row["phase"]] = row["step"]
        self._fh = open(self.path, "a", encoding="utf-8")

    @staticmethod
    def _line(row):
        return json.dumps(row, sort_keys=True) + "\n"

    def append(self, row: dict):
        phase, step = row["phase"], int(row["step"])
        if phase in self._last and step <= self._last[phase]:
            raise ValueError(f"non-monotone step {step} in phase {phase!r}")
        self._last[phase] = step
        row = {k: (float(v) if isinstance(v, np.floating) else v) for k, v in row.items()}
        if self.wallclock:
            row["wallclock"] = time.perf_counter() - self._t0
        self._fh.write(self._line(row))
        self._fh.flush()

    __call__ = append

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path) -> list:
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break  # torn final write
                rows.append(json.loads(line))
        return rows


# ---------------------------------------------------------------- stages

def seed_dir(cfg: RunConfig, seed) -> Path:
    return Path(cfg.output_dir) / f"seed_{seed}"


def run_dir(cfg: RunConfig, seed) -> Path:
    return seed_dir(cfg, seed) / cfg.run_name


def obtain_dataset(cfg: RunConfig, env, seed, path: Path):
    want = {"env_name": cfg.env, "behavior_desc": cfg.tier, "seed": int(seed),
            "size": int(cfg.dataset_size)}
    if path.exists():
        ds = io.load_dataset(path)
        if all(ds.meta.get(k) == v for k, v in want.items()):
            return ds
    ds = generate_dataset(env, cfg.tier, cfg.dataset_size, seed)
    io.save_dataset(path, ds)
    return ds


def stage1_key(cfg: RunConfig, seed) -> str:
    """Identity of a Stage I run; the readout weight and logging do not matter."""
    s1 = asdict(replace(cfg.stage1, seed=seed, lambda_u=0.0, log_every=1))
    return json.dumps({"stage1": s1, "env": cfg.env, "tier": cfg.tier,
                       "size": cfg.dataset_size, "data_seed": int(seed)},
                      sort_keys=True)


def obtain_bundle(cfg: RunConfig, ds, seed, path: Path, metrics_path: Path):
    key = stage1_key(cfg, seed)
    if path.exists():
        bundle = io.load_bundle(path)
        if bundle.meta.get("run_key") == key:
            return bundle
    with MetricsLog(metrics_path, cfg.wallclock) as log:
        bundle = train_stage1(ds, replace(cfg.stage1, seed=seed), log=log)
    entries, meta = io.bundle_entries(bundle)
    meta["extra"] = {**meta["extra"], "run_key": key}
    io.save_checkpoint(path, entries, meta)
    # always continue from the file so fresh and resumed runs match exactly
    return io.load_bundle(path)


def _eval(cfg, env, bundle, policy, gate, seed, keep=False):
    return evaluate_policy(env, bundle, policy, gate, cfg.eval_episodes,
                           seed + cfg.eval_seed_offset, keep_records=keep)


def _score(r):
    return r.success_rate if r.success_rate is not None else r.mean_return


def train_stage2(cfg: RunConfig, env, bundle, ds, seed, log: MetricsLog):
    """Stage II in chunks: evaluation every ``eval_every`` steps and the
    conflict probes at the halfway point."""
    s2 = replace(cfg.stage2, seed=seed)
    tr = make_trainer(bundle, ds, s2)
    if isinstance(tr, PlasTrainer):
        tr.pretrain(log)
    total = phase2_steps(s2)
    mid = total // 2 if cfg.diagnose and cfg.conflict_batches > 0 else -1
    conflicts = []
    done = 0
    while done < total:
        n = min(cfg.eval_every - done % cfg.eval_every, total - done)
        if done < mid < done + n:
            n = mid - done
        tr.run(n, log)
        done += n
        if done == mid:
            conflicts = [measure_conflict(tr, seed=seed * 1000 + i)
                         for i in range(cfg.conflict_batches)]
        if done % cfg.eval_every == 0 or done == total:
            r = _eval(cfg, env, bundle, tr.result(), cfg.gate, seed)
            log({"phase": "eval", "step": done, "score": _score(r),
                 "regret": r.regret, "accept_rate": r.accept_rate})
    return tr.result(), conflicts


def diagnose_seed(cfg: RunConfig, bundle, policy, ds, seed, conflicts):
    rng = make_rng(seed + 5)
    states = ds.states[rng.choice(len(ds), min(1000, len(ds)), replace=False)]
    acts = policy_actions(bundle, policy, states, make_rng(seed + 9))
    sup = support_distance_ratio(ds, acts)
    geo = residual_geometry_summary(ds, bundle.base_policy, seed=seed)
    out = {"support_ratio_q95": sup.ratio_q95, "support_boundary": sup.boundary,
           "mode_count_estimate": geo["mode_count_estimate"],
           "cluster_fractions": geo["cluster_fractions"]}
    if conflicts:
        out["dd_mean"] = float(np.mean([c.dd for c in conflicts]))
        out["vsd_mean"] = float(np.mean([c.vsd for c in conflicts]))
        out["conflict_step"] = conflicts[0].step
    return out


def write_kv(path, items: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {json.dumps(v)}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                k, _, v = line.partition(" = ")
                out[k] = json.loads(v)
    return out


def run_seed(cfg: RunConfig, seed, env=None) -> dict:
    env = env or make_env(cfg.env)
    sd, rd = seed_dir(cfg, seed), run_dir(cfg, seed)
    rd.mkdir(parents=True, exist_ok=True)
    ds = run_stage("gen-data", seed, obtain_dataset, cfg, env, seed, sd / "dataset.bin")
    bundle = run_stage("stage1", seed, obtain_bundle, cfg, ds, seed,
                       sd / "stage1.ckpt", sd / "stage1_metrics.jsonl")
    bundle = with_lambda_u(bundle, cfg.stage1.lambda_u)

    def stage2():
        with MetricsLog(rd / "metrics.jsonl", cfg.wallclock) as log:
            policy, conflicts = train_stage2(cfg, env, bundle, ds, seed, log)
        io.save_policy(rd / "stage2.ckpt", policy, {"variant": cfg.stage2.variant})
        return policy, conflicts

    policy, conflicts = run_stage("stage2", seed, stage2)

    def final_eval():
        r = _eval(cfg, env, bundle, policy, cfg.gate, seed, keep=True)
        base = _eval(cfg, env, bundle, None, ALWAYS_REJECT, seed)
        res = {"score": _score(r), "regret": r.regret, "accept_rate": r.accept_rate,
               "mean_return": r.mean_return, "base_score": _score(base),
               "base_regret": base.regret}
        io.save_eval_records(rd / "eval.bin", r.records, res)
        return res

    result = run_stage("eval", seed, final_eval)
    if cfg.diagnose:
        diag = run_stage("diagnose", seed, diagnose_seed, cfg, bundle, policy, ds,
                         seed, conflicts)
        write_kv(rd / "diagnostics.txt", diag)
        result.update(diag)
    return result


def summarize(cfg: RunConfig, per_seed: dict) -> dict:
    out = {"env": cfg.env, "variant": cfg.stage2.variant, "run": cfg.run_name,
           "seeds": list(cfg.seeds)}
    for seed, res in per_seed.items():
        for k, v in res.items():
            out[f"seed.{seed}.{k}"] = v
    keys = [k for k, v in next(iter(per_seed.values())).items()
            if isinstance(v, (int, float)) and not isinstance(v, bool)]
    for k in keys:
        vals = np.array([per_seed[s][k] for s in per_seed], dtype=np.float64)
        out[f"{k}.mean"] = float(vals.mean())
        out[f"{k}.std"] = float(vals.std())
    return out


def run_pipeline(cfg: RunConfig) -> dict:
    """All stages for every seed; returns and writes the cross-seed summary."""
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg.env)
    per_seed = {seed: run_seed(cfg, seed, env) for seed in cfg.seeds}
    summary = summarize(cfg, per_seed)
    write_kv(root / f"summary_{cfg.run_name}.txt", summary)
    return summary


def load_run(cfg: RunConfig, seed):
    """Bundle, policy and dataset of a finished run."""
    sd, rd = seed_dir(cfg, seed), run_dir(cfg, seed)
    bundle = with_lambda_u(io.load_bundle(sd / "stage1.ckpt"), cfg.stage1.lambda_u)
    return bundle, io.load_policy(rd / "stage2.ckpt"), io.load_dataset(sd / "dataset.bin")


# ---------------------------------------------------------------- ablations

def _fmt(v):
    return "%g" % v if isinstance(v, float) else str(v)


def ablation_cells(cfg: RunConfig, axis: str) -> list:
    """``(label, config)`` pairs for one ablation axis."""
    cells = []
    if axis == "lambda_g":
        for v in (0.0, 0.5, 2.0):
            cells.append((f"lambda_g={_fmt(v)}",
                          replace(cfg, stage2=replace(cfg.stage2, lambda_g=v))))
    elif axis == "lambda_u":
        for v in (0.0, 0.5, 2.0):
            cells.append((f"lambda_u={_fmt(v)}",
                          replace(cfg, stage1=replace(cfg.stage1, lambda_u=v))))
    elif axis == "temperature_filter":
        w = cfg.stage2.weighting
        for t in (0.1, 0.3, 1.0, "uniform"):
            for f in ("soft", "hard"):
                wc = replace(w, sensitivity="uniform", filter=f) if t == "uniform" \
                    else replace(w, sensitivity="exponential", temperature=t, filter=f)
                cells.append((f"T={_fmt(t)},{f}",
                              replace(cfg, stage2=replace(cfg.stage2, weighting=wc))))
    elif axis == "gate_thresholds":
        g = cfg.gate
        for a in (-1e9, g.eta_abs, 1e9):
            for r in (-1e9, g.eta_rel, 1e9):
                cells.append((f"eta_abs={_fmt(a)},eta_rel={_fmt(r)}",
                              replace(cfg, gate=replace(g, eta_abs=a, eta_rel=r))))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    return [(label, replace(c, tag=f"{cfg.run_name}.{axis}.{i}"))
            for i, (label, c) in enumerate(cells)]


ABLATION_AXES = ("lambda_g", "lambda_u", "temperature_filter", "gate_thresholds")


def _row(label, per_seed):
    score = np.array([r["score"] for r in per_seed])
    return {"cell": label, "score_mean": float(score.mean()),
            "score_std": float(score.std()),
            "regret_mean": float(np.mean([r["regret"] for r in per_seed])),
            "accept_rate_mean": float(np.mean([r["accept_rate"] for r in per_seed])),
            "per_seed": [float(s) for s in score]}


def ablation_grid(cfg: RunConfig, axis: str) -> list:
    """One row per cell: score mean and std over seeds, regret, accept rate.

    Gate cells share one trained policy and only re-run the evaluation.
    """
    cells = ablation_cells(cfg, axis)
    rows = []
    if axis == "gate_thresholds":
        base = replace(cfg, diagnose=False)
        run_pipeline(base)
        env = make_env(cfg.env)
        loaded = {s: load_run(base, s) for s in cfg.seeds}
        for label, c in cells:
            res = []
            for s in cfg.seeds:
                bundle, policy, _ = loaded[s]
                r = _eval(c, env, bundle, policy, c.gate, s)
                res.append({"score": _score(r), "regret": r.regret,
                            "accept_rate": r.accept_rate})
            rows.append(_row(label, res))
    else:
        for label, c in cells:
            c = replace(c, diagnose=False)
            run_pipeline(c)
            res = [read_kv(Path(c.output_dir) / f"summary_{c.run_name}.txt")]
            per = [{"score": res[0][f"seed.{s}.score"],
                    "regret": res[0][f"seed.{s}.regret"],
                    "accept_rate": res[0][f"seed.{s}.accept_rate"]} for s in c.seeds]
            rows.append(_row(label, per))
    write_table(Path(cfg.output_dir) / f"ablation_{axis}.txt", axis, rows)
    return rows


def format_table(axis, rows) -> str:
    head = f"{axis:<36} {'score':>22} {'regret':>10} {'accept':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['cell']:<36} {r['score_mean']:>12.4f} +- {r['score_std']:<6.4f}"
                     f" {r['regret_mean']:>10.4f} {r['accept_rate_mean']:>8.3f}")
    return "\n".join(lines) + "\n"


def write_table(path, axis, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_table(axis, rows))


def resolve_output_dir(cfg: RunConfig) -> RunConfig:
    """``SPAR_OUT`` in the environment wins over the configured directory."""
    out = os.environ.get("SPAR_OUT")
    return replace(cfg, output_dir=out) if out else cfg
