import json
import os
import re
import time
from pathlib import Path

import pytest

from spar import config as cfgmod
from spar import pipeline

_DETAILS = {}
_OUTCOMES = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


@pytest.fixture(scope="session")
def record():
    """``record(n, detail)`` attaches a one-line measurement to criterion ``n``."""
    def _record(n, detail):
        _DETAILS[int(n)] = detail
    return _record


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        if _OUTCOMES.get(n) != "FAIL":
            _OUTCOMES[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_OUTCOMES):
        terminalreporter.write_line(
            f"criterion {n:>2}: {_OUTCOMES[n]}  {_DETAILS.get(n, '')}")


# ---------------------------------------------------------------- desk runs

class DeskRuns:
    """Desk-preset pipeline runs shared by the acceptance criteria.

    Set ``SPAR_ACCEPT_DIR`` to keep finished runs between sessions; a run is
    reused only when its stored config text matches.
    """

    def __init__(self, root: Path):
        self.root = root
        self.times = {}

    def config(self, env, variant):
        return cfgmod.preset(env, variant=variant,
                             output_dir=str(self.root / env), tag=variant)

    def get(self, env, variant):
        cfg = self.config(env, variant)
        out = Path(cfg.output_dir)
        stamp = out / f"config_{variant}.txt"
        summary = out / f"summary_{variant}.txt"
        timing = out / f"time_{variant}.json"
        text = cfgmod.serialize(cfg)
        if summary.exists() and stamp.exists() and stamp.read_text() == text \
                and timing.exists():
            self.times[(env, variant)] = json.loads(timing.read_text())["seconds"]
            return cfg, pipeline.read_kv(summary)
        t0 = time.perf_counter()
        result = pipeline.run_pipeline(cfg)
        dt = time.perf_counter() - t0
        self.times[(env, variant)] = dt
        stamp.write_text(text)
        timing.write_text(json.dumps({"seconds": dt}))
        return cfg, json.loads(json.dumps(result))


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = os.environ.get("SPAR_ACCEPT_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("desk_runs")
    root.mkdir(parents=True, exist_ok=True)
    return DeskRuns(root)


# ---------------------------------------------------------------- small world

@pytest.fixture(scope="session")
def small_world():
    """A tiny dataset, a briefly trained frozen bundle and a small Stage II config."""
    from spar.anchor import Stage1Config, train_stage1
    from spar.envs import generate_dataset, make_env
    from spar.residual import Stage2Config

    env = make_env("unimodal-quad")
    ds = generate_dataset(env, "medium", 2000, 0)
    bundle = train_stage1(ds, Stage1Config(steps=200, batch_size=64, hidden=(16, 16)))
    s2 = Stage2Config(steps=40, batch_size=16, hidden=(16, 16), cvae_hidden=(16, 16, 16),
                      latent_hidden=(16, 16), latent_dim=4, K=8, guide_states=8,
                      projection_period=2)
    return env, ds, bundle, s2

