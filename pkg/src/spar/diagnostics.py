"""Diagnostics: gradient conflict, action-support distance, residual geometry."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist
from sklearn.cluster import DBSCAN

from .envs import base_actions, nearest_rank_quantile
from .nn import adam_step, make_rng


@dataclass
class ConflictReport:
    dd: float
    vsd: float
    variant: str
    step: int
    fit_loss_before: float
    fit_loss_after: float


def _variant_of(trainer):
    name = type(trainer).__name__.lower()
    for v in ("mlp", "plas", "proj"):
        if name.startswith(v):
            return v
    return name


def guidance_update(trainer, g_guide):
    """Parameter change caused by ``g_guide`` alone through the live Adam state.

    The optimizer would move the parameters even with a zero gradient
    (momentum), so that drift is subtracted to isolate the guidance term.
    """
    theta = trainer.theta
    if not np.any(g_guide):
        return np.zeros_like(theta)
    with_g, _ = adam_step(trainer.opt.copy(), theta, g_guide)
    without, _ = adam_step(trainer.opt.copy(), theta, np.zeros_like(theta))
    return with_g - without


def measure_conflict(trainer, idx=None, seed=0) -> ConflictReport:
    """Directional damage and value-shift damage of one guidance step.

    ``DD = <grad fit, delta_theta>`` (positive: the step works against the
    fit) and ``VSD = fit(theta + delta_theta) - fit(theta)``, both on the
    same batch and the same reparameterization noise. The trainer is left
    untouched.
    """
    rng = make_rng(seed)
    if idx is None:
        idx = rng.integers(0, len(trainer.prep.s_raw), size=trainer.cfg.batch_size)
    theta_before = trainer.theta.copy()
    opt_before = trainer.opt.copy()
    noise = rng.standard_normal((len(idx), trainer.cfg.latent_dim))
    fit0, g_fit = trainer.fit_loss_and_grad(idx, noise=noise)
    _, g_guide = trainer.guide_loss_and_grad(idx, rng=make_rng(seed + 1))
    delta = guidance_update(trainer, g_guide)
    dd = float(np.dot(g_fit, delta))
    if np.any(delta):
        fit1, _ = trainer.fit_loss_and_grad(idx, params=theta_before + delta,
                                            noise=noise)
    else:
        fit1 = fit0
    if not (np.array_equal(theta_before, trainer.theta)
            and trainer.opt.step == opt_before.step
            and np.array_equal(trainer.opt.first_moment, opt_before.first_moment)):
        raise RuntimeError("measure_conflict modified the trainer state")
    return ConflictReport(dd, float(fit1 - fit0), _variant_of(trainer),
                          int(trainer.step_count), float(fit0), float(fit1))


def target_update_probe(trainer, idx=None, seed=0):
    """Largest change a guided step makes to the target decoder, EMA disabled.

    Runs one projection step (fit plus self-imitation) on a scratch copy of a
    PROJ trainer with the target average switched off. Candidates are drawn
    from the target but treated as constants, so the result must be exactly
    zero while the online decoder moves. Returns ``(target_change,
    online_change)`` as max-abs differences.
    """
    memo = {id(trainer.bundle): trainer.bundle, id(trainer.prep): trainer.prep}
    scratch = copy.deepcopy(trainer, memo)
    ps = scratch.state
    ps.ema = lambda: None
    if ps.lambda_g == 0:
        raise ValueError("probe needs a guided trainer (lambda_g > 0)")
    if idx is None:
        idx = make_rng(seed).integers(0, len(scratch.prep.s_raw),
                                      size=scratch.cfg.batch_size)
    target0 = ps.target.decoder.params.copy()
    online0 = ps.online.decoder.params.copy()
    scratch.step_count = ps.projection_period * (trainer.step_count // ps.projection_period + 1)
    scratch.train_step(np.asarray(idx))
    return (float(np.max(np.abs(ps.target.decoder.params - target0))),
            float(np.max(np.abs(ps.online.decoder.params - online0))))


@dataclass
class SupportReport:
    ratio_q95: float
    k: int
    boundary: float
    n_probe: int
    probe_q95: float
    probe_distances: np.ndarray = None
    self_distances: np.ndarray = None


def _actions_of(ds):
    return np.asarray(getattr(ds, "actions", ds), dtype=np.float64)


def support_distance_ratio(ds, actions, k=5, q=0.95) -> SupportReport:
    """q95 of probe kNN distances over q95 of dataset leave-one-out distances.

    Distances are the mean Euclidean distance to the ``k`` nearest dataset
    actions, found by exact search.
    """
    data = _actions_of(ds)
    probes = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(data) < k + 1:
        raise ValueError(f"dataset needs at least k+1={k + 1} actions")
    tree = cKDTree(data)
    d_probe, _ = tree.query(probes, k=k)
    d_self, _ = tree.query(data, k=k + 1)
    d_probe = np.asarray(d_probe).reshape(len(probes), k).mean(axis=1)
    # the nearest hit of every dataset point is itself
    d_self = d_self[:, 1:].mean(axis=1)
    boundary = nearest_rank_quantile(d_self, q)
    if not boundary > 0:
        raise ValueError("dataset actions are degenerate (zero self-distance)")
    top = nearest_rank_quantile(d_probe, q)
    return SupportReport(top / boundary, k, boundary, len(probes), top,
                         d_probe, d_self)


def policy_actions(bundle, policy, states, rng):
    """One raw (ungated) action per state: clip(a_base + residual sample)."""
    a_base = bundle.base_action(states)
    delta = policy.propose(bundle, states, a_base, 1, rng)[:, 0]
    return np.clip(a_base + delta, -1.0, 1.0)


def residual_geometry_summary(ds, base, max_points=4000, min_fraction=0.01,
                              seed=0, quantiles=(0.05, 0.25, 0.5, 0.75, 0.95)):
    """Density clusters of dataset residuals ``a - base(s)``.

    DBSCAN radius is a quarter of the median pairwise residual distance.
    A core point needs ``min_fraction`` of all points inside that radius, so
    sparse bridges between modes do not merge them; clusters smaller than
    ``min_fraction`` are treated as noise.
    """
    res = np.asarray(ds.actions, dtype=np.float64) - base_actions(ds, base)
    rng = make_rng(seed)
    if len(res) > max_points:
        res = res[np.sort(rng.choice(len(res), max_points, replace=False))]
    n = len(res)
    sample = res[rng.choice(n, min(n, 1500), replace=False)]
    eps = max(float(np.median(pdist(sample))) / 4.0, 1e-6) if n > 1 else 1e-6
    min_size = max(1, int(np.ceil(min_fraction * n)))
    labels = DBSCAN(eps=eps, min_samples=min_size).fit_predict(res)
    sizes = sorted((int(np.sum(labels == c)) for c in set(labels) if c >= 0),
                   reverse=True)
    sizes = [c for c in sizes if c >= min_size]
    mags = np.linalg.norm(res, axis=1)
    return {
        "mode_count_estimate": len(sizes),
        "cluster_sizes": sizes,
        "cluster_fractions": [c / n for c in sizes],
        "magnitude_quantiles": {float(p): nearest_rank_quantile(mags, p)
                                for p in quantiles},
        "eps": eps,
        "n": n,
    }
