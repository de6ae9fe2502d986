"""Synthetic continuous-control tasks with a closed-form optimal value.

Three of the tasks are one-step contextual bandits (every transition is
terminal), so the reward *is* the optimal action value and regret can be read
off exactly. ``branch-maze`` is an episodic point-navigation task with a
sparse goal reward where the interesting failure is averaging over the two
branches at a junction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .nn import make_rng

ENV_NAMES = ("unimodal-quad", "bimodal-bandit", "narrow-ridge", "branch-maze")
BEHAVIORS = ("medium", "medium-replay-like", "mixture-expert", "sparse-diverse")


class UnknownEnvironment(ValueError):
    pass


def _fixed_matrix(tag: int, shape, scale=1.0):
    return scale * make_rng(9_000 + tag).normal(size=shape)


class OracleEnv:
    """Base class; subclasses fill in the oracle and behavior policies."""

    name = "base"
    d_s = 0
    d_a = 0
    lipschitz_L = 0.0
    diameter_D = 2.0
    horizon = 1
    episodic = False
    reward_shift = 0.0
    default_behavior = "medium"

    def q_star(self, s, a):
        raise NotImplementedError

    def optimal_action(self, s):
        raise NotImplementedError

    def v_star(self, s):
        return self.q_star(s, self.optimal_action(s))

    def regret(self, s, a):
        return self.v_star(s) - self.q_star(s, a)

    def sample_states(self, n, rng):
        return rng.uniform(-1.0, 1.0, size=(n, self.d_s))

    def reset(self, n, rng):
        return self.sample_states(n, rng)

    def step(self, s, a):
        """Vectorised transition: returns ``(next_state, reward, done)``."""
        a = np.clip(a, -1.0, 1.0)
        r = self.q_star(s, a)
        return s.copy(), r, np.ones(len(s), dtype=bool)

    def behavior_action(self, s, tier, rng, noise_scale=1.0):
        raise NotImplementedError


class UnimodalQuad(OracleEnv):
    """``Q*(s, a) = -||a - a*(s)||^2`` with ``a*(s) = 0.4 tanh(A s)``.

    The logged policy is shifted away from ``a*`` on half of the state space,
    so a cloned policy has a state-dependent, unimodal residual to recover.
    """

    name = "unimodal-quad"
    d_s = 2
    d_a = 2
    # |grad| = 2||a - a*|| and ||a - a*|| <= sqrt(2) * 1.4 on the box
    lipschitz_L = 2.0 * np.sqrt(2.0) * 1.4
    bias_dir = np.array([1.0, -1.0]) / np.sqrt(2.0)

    def __init__(self):
        self.A = _fixed_matrix(1, (2, 2), 1.2)

    def optimal_action(self, s):
        return 0.4 * np.tanh(np.asarray(s) @ self.A.T)

    def q_star(self, s, a):
        d = np.asarray(a) - self.optimal_action(s)
        return -np.sum(d * d, axis=-1)

    def v_star(self, s):
        return np.zeros(len(np.atleast_2d(s)))

    def behavior_bias(self, s):
        return 0.55 * np.maximum(np.asarray(s)[:, :1], 0.0) * self.bias_dir

    def behavior_action(self, s, tier, rng, noise_scale=1.0):
        n = len(s)
        mean = self.optimal_action(s) + self.behavior_bias(s)
        if tier == "medium":
            sd = np.full((n, 1), 0.2)
        elif tier == "medium-replay-like":
            sd = rng.choice([0.1, 0.25, 0.45], size=(n, 1))
            mean = self.optimal_action(s) + self.behavior_bias(s) * rng.uniform(0.5, 1.5, (n, 1))
        elif tier == "mixture-expert":
            expert = rng.random((n, 1)) < 0.5
            mean = np.where(expert, self.optimal_action(s), mean)
            sd = np.where(expert, 0.05, 0.2)
        elif tier == "sparse-diverse":
            sd = np.full((n, 1), 0.5)
        else:
            raise ValueError(f"unknown behavior tier {tier!r}")
        return mean + noise_scale * sd * rng.normal(size=(n, self.d_a))


class BimodalBandit(OracleEnv):
    """Two equal Gaussian bumps of width ``w`` at ``+m(s)`` and ``-m(s)``."""

    name = "bimodal-bandit"
    d_s = 2
    d_a = 2
    width = 0.15
    radius = 0.5
    default_behavior = "mixture-expert"

    def __init__(self):
        # steepest slope of one bump is exp(-1/2) / w; two bumps at most double it
        self.lipschitz_L = 2.0 * np.exp(-0.5) / self.width

    def mode(self, s):
        s = np.asarray(s)
        # keeps |theta| < pi/2 so the arcs of +m and -m never meet
        theta = 0.25 * np.pi * s[:, 0] + 0.25 * s[:, 1]
        return self.radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def q_star(self, s, a):
        m = self.mode(s)
        a = np.asarray(a)
        k = -0.5 / self.width ** 2
        return (np.exp(k * np.sum((a - m) ** 2, axis=-1))
                + np.exp(k * np.sum((a + m) ** 2, axis=-1)))

    def optimal_action(self, s):
        return self.mode(s)

    def behavior_action(self, s, tier, rng, noise_scale=1.0):
        n = len(s)
        sign = np.where(rng.random((n, 1)) < 0.5, 1.0, -1.0)
        m = self.mode(s)
        if tier == "mixture-expert":
            expert = rng.random((n, 1)) < 0.5
            mean = sign * np.where(expert, m, 0.8 * m)
            sd = np.where(expert, 0.03, 0.08)
        elif tier == "medium":
            mean, sd = sign * 0.8 * m, np.full((n, 1), 0.08)
        elif tier == "medium-replay-like":
            mean = sign * m * rng.uniform(0.5, 1.0, (n, 1))
            sd = rng.choice([0.05, 0.1, 0.2], size=(n, 1))
        elif tier == "sparse-diverse":
            mean, sd = sign * m, np.full((n, 1), 0.25)
        else:
            raise ValueError(f"unknown behavior tier {tier!r}")
        return mean + noise_scale * sd * rng.normal(size=(n, self.d_a))


class NarrowRidge(OracleEnv):
    """High value only on a thin curved 1-D ridge inside a 4-D action box.

    ``Q*(s, a) = -k d(a, ridge_s)^2 - alpha ||a - p(s)||^2`` where ``p(s)``
    is a point on the ridge. Both terms are non-positive and vanish at
    ``p(s)``, so ``p(s)`` is the maximiser and ``V* = 0``.
    """

    name = "narrow-ridge"
    d_s = 2
    d_a = 4
    steep = 50.0
    alpha = 1.0
    off_ridge_sd = 0.01
    # |grad| <= 2 (k + alpha) * max distance in the box (= 4)
    lipschitz_L = 8.0 * (steep + alpha)

    _coarse = np.linspace(-1.0, 1.0, 801)

    def curve(self, t, s):
        """Ridge points ``c(t; s)``; ``t`` is ``(n, T)`` and ``s`` is ``(n, d_s)``."""
        t = np.asarray(t, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        s0, s1 = s[:, :1], s[:, 1:2]
        return np.stack([
            0.6 * t + 0.15 * s0,
            0.4 * np.sin(1.5 * t) + 0.15 * s1,
            0.3 * np.cos(2.0 * t) - 0.1 - 0.1 * s0,
            0.25 * t * t - 0.1 + 0.0 * s1,
        ], axis=-1)

    def t_opt(self, s):
        s = np.asarray(s)
        return 0.5 * np.tanh(s[:, 0] + s[:, 1])

    def optimal_action(self, s):
        return self.curve(self.t_opt(s)[:, None], s)[:, 0]

    def ridge_distance(self, s, a, chunk=2048):
        """Euclidean distance to the ridge via a dense grid plus local refinement."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        out = np.empty(len(a))
        h = self._coarse[1] - self._coarse[0]
        for lo in range(0, len(a), chunk):
            sl = slice(lo, lo + chunk)
            ss, aa = s[sl], a[sl]
            n = len(aa)
            pts = self.curve(np.broadcast_to(self._coarse, (n, len(self._coarse))), ss)
            d2 = np.sum((pts - aa[:, None, :]) ** 2, axis=-1)
            t0 = self._coarse[np.argmin(d2, axis=1)]
            fine = t0[:, None] + np.linspace(-h, h, 81)[None, :]
            fine = np.clip(fine, -1.0, 1.0)
            pts = self.curve(fine, ss)
            d2 = np.sum((pts - aa[:, None, :]) ** 2, axis=-1)
            out[sl] = np.sqrt(d2.min(axis=1))
        return out

    def q_star(self, s, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        d = self.ridge_distance(s, a)
        p = self.optimal_action(s)
        return -self.steep * d * d - self.alpha * np.sum((a - p) ** 2, axis=-1)

    def v_star(self, s):
        return np.zeros(len(np.atleast_2d(s)))

    def behavior_action(self, s, tier, rng, noise_scale=1.0):
        n = len(s)
        t0 = self.t_opt(s)
        if tier == "medium":
            t = t0 - 0.45 + 0.15 * noise_scale * rng.normal(size=n)
        elif tier == "medium-replay-like":
            t = t0 - rng.uniform(0.2, 0.8, n) + 0.2 * noise_scale * rng.normal(size=n)
        elif tier == "mixture-expert":
            expert = rng.random(n) < 0.5
            t = np.where(expert, t0, t0 - 0.45) + 0.1 * noise_scale * rng.normal(size=n)
        elif tier == "sparse-diverse":
            t = rng.uniform(-1.0, 1.0, n)
        else:
            raise ValueError(f"unknown behavior tier {tier!r}")
        t = np.clip(t, -1.0, 1.0)
        a = self.curve(t[:, None], s)[:, 0]
        return a + noise_scale * self.off_ridge_sd * rng.normal(size=(n, self.d_a))


@dataclass(frozen=True)
class _Rect:
    x0: float
    x1: float
    y0: float
    y1: float

    def contains(self, p):
        return ((p[..., 0] >= self.x0) & (p[..., 0] <= self.x1)
                & (p[..., 1] >= self.y0) & (p[..., 1] <= self.y1))


class BranchMaze(OracleEnv):
    """2-D point navigation: a corridor leads to a junction with two branches.

    Only the upper branch reaches the goal; the lower branch is a dead end.
    The logged data favors the dead end, so a cloned policy at the junction
    leans toward the wrong branch or stalls between the two.
    """

    name = "branch-maze"
    d_s = 2
    d_a = 2
    horizon = 60
    episodic = True
    speed = 0.1
    reward_shift = -1.0
    default_behavior = "sparse-diverse"
    goal = np.array([2.6, 1.6])
    goal_radius = 0.3
    start = np.array([0.2, 1.0])
    # undirected logging: most episodes explore the dead end
    logged_up_prob = 0.35
    lipschitz_L = float("nan")

    rooms = (
        _Rect(0.0, 1.6, 0.8, 1.2),   # entry corridor
        _Rect(1.2, 1.6, 0.2, 1.8),   # junction
        _Rect(1.2, 2.8, 1.4, 1.8),   # upper branch (goal)
        _Rect(1.2, 2.8, 0.2, 0.6),   # lower branch (dead end)
    )
    up_waypoints = ((1.4, 1.0), (1.4, 1.6), (2.6, 1.6))
    down_waypoints = ((1.4, 1.0), (1.4, 0.4), (2.6, 0.4))

    def free(self, p):
        p = np.asarray(p)
        ok = np.zeros(p.shape[:-1], dtype=bool)
        for r in self.rooms:
            ok |= r.contains(p)
        return ok

    def at_goal(self, p):
        return np.linalg.norm(np.asarray(p) - self.goal, axis=-1) <= self.goal_radius

    def reset(self, n, rng):
        return self.start + rng.uniform(-0.05, 0.05, size=(n, 2))

    def sample_states(self, n, rng):
        pts = np.empty((0, 2))
        while len(pts) < n:
            cand = rng.uniform([0.0, 0.2], [2.8, 1.8], size=(2 * n, 2))
            pts = np.concatenate([pts, cand[self.free(cand)]])
        return pts[:n]

    def move(self, s, a):
        a = np.clip(a, -1.0, 1.0)
        full = s + self.speed * a
        only_x = s + self.speed * a * np.array([1.0, 0.0])
        only_y = s + self.speed * a * np.array([0.0, 1.0])
        nxt = np.where(self.free(full)[:, None], full,
                       np.where(self.free(only_x)[:, None], only_x,
                                np.where(self.free(only_y)[:, None], only_y, s)))
        return nxt

    def step(self, s, a):
        nxt = self.move(np.asarray(s, dtype=np.float64), a)
        done = self.at_goal(nxt)
        return nxt, done.astype(np.float64), done

    def q_star(self, s, a):
        raise NotImplementedError("branch-maze has no closed-form Q*; "
                                  "score it by success rate")

    def optimal_action(self, s):
        return self.waypoint_action(s, np.ones(len(s), dtype=bool))

    def waypoint_action(self, s, up):
        """Max-norm-1 heading along the waypoint path of the chosen branch."""
        s = np.asarray(s, dtype=np.float64)
        x, y = s[:, 0], s[:, 1]
        branch_y = np.where(up, 1.6, 0.4)
        in_branch = x > 1.6
        wrong_branch = in_branch & ((y > 1.2) != up)
        lined_up = np.abs(y - branch_y) < 0.08
        tx = np.where(x < 1.2, 1.4, np.where(lined_up, 2.6, 1.4))
        ty = np.where(x < 1.2, 1.0, branch_y)
        tx = np.where(in_branch & ~wrong_branch, 2.6, tx)
        tx = np.where(wrong_branch, 1.4, tx)
        ty = np.where(wrong_branch, y, ty)
        d = np.stack([tx - x, ty - y], axis=1)
        return d / np.maximum(np.abs(d).max(axis=1, keepdims=True), 0.1)

    def behavior_action(self, s, tier, rng, noise_scale=1.0):
        raise NotImplementedError("branch-maze data is generated by rollouts")


def make_env(name: str) -> OracleEnv:
    table = {
        "unimodal-quad": UnimodalQuad,
        "bimodal-bandit": BimodalBandit,
        "narrow-ridge": NarrowRidge,
        "branch-maze": BranchMaze,
    }
    try:
        return table[name]()
    except KeyError:
        raise UnknownEnvironment(
            f"unknown environment {name!r}; choose from {ENV_NAMES}") from None


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    meta: dict = field(default_factory=dict)
    state_mean: np.ndarray = None
    state_std: np.ndarray = None

    def __post_init__(self):
        n = len(self.states)
        if n < 1:
            raise ValueError("dataset must hold at least one transition")
        for arr in (self.actions, self.rewards, self.next_states, self.dones):
            if len(arr) != n:
                raise ValueError("transition fields have different lengths")
        if self.state_mean is None:
            self.state_mean = self.states.mean(axis=0)
            self.state_std = np.maximum(self.states.std(axis=0), 1e-6)
        self.meta.setdefault("size", n)

    def __len__(self):
        return len(self.states)

    @property
    def d_s(self):
        return self.states.shape[1]

    @property
    def d_a(self):
        return self.actions.shape[1]

    def normalize(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_std

    def sample(self, batch_size, rng):
        return rng.integers(0, len(self), size=batch_size)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _maze_rollouts(env: BranchMaze, n, rng, noise_scale):
    S, A, R, S2, D = [], [], [], [], []
    total = 0
    while total < n:
        batch = 64
        s = env.sample_states(batch, rng)
        # half of the episodes start near the entrance so the junction is well covered
        near = rng.random(batch) < 0.5
        s[near] = env.reset(int(near.sum()), rng)
        up = rng.random(batch) < env.logged_up_prob
        alive = np.ones(batch, dtype=bool)
        for _ in range(env.horizon):
            a = env.waypoint_action(s, up) + noise_scale * 0.3 * rng.normal(size=s.shape)
            a = np.clip(a, -1.0, 1.0)
            nxt, r, done = env.step(s, a)
            idx = np.flatnonzero(alive)
            S.append(s[idx]); A.append(a[idx]); R.append(r[idx])
            S2.append(nxt[idx]); D.append(done[idx])
            total += len(idx)
            alive &= ~done
            s = nxt
            if not alive.any():
                break
    cat = np.concatenate
    return cat(S)[:n], cat(A)[:n], cat(R)[:n], cat(S2)[:n], cat(D)[:n]


def generate_dataset(env: OracleEnv, behavior: str, n: int, seed: int,
                     noise_scale: float = 1.0) -> OfflineDataset:
    """Roll out the noisy logged policy of ``behavior`` tier for ``n`` steps.

    Values are rounded through float32 so the on-disk file round-trips exactly.
    """
    if behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior tier {behavior!r}")
    if n < 1000:
        raise ValueError("need n >= 1000 transitions")
    rng = make_rng(seed)
    if isinstance(env, BranchMaze):
        s, a, r, s2, d = _maze_rollouts(env, n, rng, noise_scale)
    else:
        s = env.sample_states(n, rng)
        a = np.clip(env.behavior_action(s, behavior, rng, noise_scale), -1.0, 1.0)
        s, a = _f32(s), _f32(a)
        s2, r, d = env.step(s, a)
    meta = {"env_name": env.name, "behavior_desc": behavior, "seed": int(seed),
            "size": int(n), "noise_scale": float(noise_scale)}
    return OfflineDataset(_f32(s), _f32(a), _f32(r), _f32(s2),
                          np.asarray(d, dtype=bool), meta)


def base_actions(ds, base):
    if hasattr(base, "act"):
        return base.act(ds.states)
    if hasattr(base, "forward"):
        return base.forward(ds.normalize(ds.states))
    return np.asarray(base(ds.states))


def nearest_rank_quantile(values, q):
    """The ``ceil(q * n)``-th smallest value (1-based), ``q`` in ``(0, 1]``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if len(v) == 0:
        raise ValueError("empty sample")
    k = int(np.ceil(q * len(v) - 1e-12))
    return float(v[min(max(k, 1), len(v)) - 1])


def pairwise_max_distance(x, limit=4096, seed=0):
    x = np.asarray(x, dtype=np.float64)
    if len(x) > limit:
        x = x[make_rng(seed).choice(len(x), size=limit, replace=False)]
    best = 0.0
    for lo in range(0, len(x), 1024):
        d2 = np.sum((x[lo:lo + 1024, None, :] - x[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return np.sqrt(best)


def residual_stats(ds: OfflineDataset, base, rho: float = 0.05, bins: int = 50,
                   seed: int = 0):
    """Locality radius ``delta_rho``, action-set diameter and their histograms."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    res = ds.actions - base_actions(ds, base)
    mags = np.linalg.norm(res, axis=1)
    delta = nearest_rank_quantile(mags, 1.0 - rho)
    diam = pairwise_max_distance(ds.actions, seed=seed)
    sub = ds.actions
    if len(sub) > 2000:
        sub = sub[make_rng(seed + 1).choice(len(sub), 2000, replace=False)]
    pair = pdist(sub)
    edges = np.linspace(0.0, max(diam, mags.max(), 1e-12), bins + 1)
    return {
        "delta_rho": delta,
        "D_A": diam,
        "magnitudes": {"edges": edges, "residual": np.histogram(mags, edges)[0],
                       "global": np.histogram(pair, edges)[0]},
        "residual_magnitudes": mags,
    }


def dataset_meta_json(ds: OfflineDataset) -> str:
    return json.dumps(ds.meta, sort_keys=True)
