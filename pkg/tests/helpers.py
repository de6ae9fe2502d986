"""Finite-difference oracle shared by the gradient tests."""

import contextlib
from dataclasses import replace

import numpy as np

import spar.nn as nn
from spar import config as cfgmod


@contextlib.contextmanager
def relu_patterns():
    """Record the sign pattern of every relu pre-activation computed inside."""
    seen = []
    orig = nn._forward

    def recording(params, sizes, acts, x, keep=False):
        h, cache = orig(params, sizes, acts, x, keep=True)
        for (z, _), act in zip(cache[1:], acts):
            if act == "relu":
                seen.append(z > 0)
        return h, (cache if keep else None)

    nn._forward = recording
    try:
        yield seen
    finally:
        nn._forward = orig


def _same(p, q):
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def directional_check(f, x, grad, n_probes=32, h=1e-5, seed=0, max_tries=400):
    """Relative error of ``<grad, v>`` against central differences of ``f``.

    ``v`` are seeded random unit directions. A probe whose two evaluations
    see different relu sign patterns straddles a kink and is redrawn.
    Returns ``(rel_err, analytic, numeric, rejected)``.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    an, fd = [], []
    rejected = 0
    while len(an) < n_probes:
        if rejected > max_tries:
            raise RuntimeError("too many probes hit a relu kink")
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v)
        with relu_patterns() as plus:
            fp = float(f(x + h * v))
        with relu_patterns() as minus:
            fm = float(f(x - h * v))
        if not _same(plus, minus):
            rejected += 1
            continue
        an.append(float(np.sum(grad * v)))
        fd.append((fp - fm) / (2.0 * h))
    return rel_err(an, fd), np.array(an), np.array(fd), rejected


def small_cfg(output_dir, variant="mlp", **kw):
    """Pipeline config that finishes in seconds."""
    base = dict(seeds=(0,), dataset_size=4000, eval_every=100, eval_episodes=300,
                conflict_batches=2)
    cfg = cfgmod.preset("unimodal-quad", variant=variant, output_dir=str(output_dir),
                        **{**base, **kw})
    return replace(cfg,
                   stage1=replace(cfg.stage1, steps=200, hidden=(16, 16), log_every=50),
                   stage2=replace(cfg.stage2, steps=200, hidden=(16, 16),
                                  cvae_hidden=(16, 16), latent_hidden=(16, 16),
                                  latent_dim=4, K=8, guide_states=8, log_every=50))
