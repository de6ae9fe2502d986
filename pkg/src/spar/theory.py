"""Brute-force checks of the localization results.

* cover-based best-arm identification on a global box versus a local ball,
  compared with the covering-number ratio it predicts;
* the localization-bias bound ``L * [||a_mu - a_base|| - delta]_+``
  checked by grid maximization;
* off-manifold drift of chords (quadratic in length) versus gradient steps
  (linear in step size) on a circle and on a sine curve.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .nn import make_rng


class DegenerateInstance(ValueError):
    """The requested instance makes the procedure meaningless."""


# ---------------------------------------------------------------- covering

def lattice_cover(d, r, box_half=None, ball_radius=None):
    """Axis-aligned lattice of pitch ``<= 2r/sqrt(d)``: an ``r``-cover in l2.

    Give ``box_half`` for the box ``[-h, h]^d`` or ``ball_radius`` for the
    ball around the origin. Ball lattice points outside the ball are pulled
    onto it, which never increases their distance to ball points.
    """
    if (box_half is None) == (ball_radius is None):
        raise ValueError("give exactly one of box_half or ball_radius")
    R = box_half if box_half is not None else ball_radius
    pitch = 2.0 * r / math.sqrt(d)
    axis = np.linspace(-R, R, int(math.ceil(2.0 * R / pitch - 1e-12)) + 1)
    pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), -1).reshape(-1, d)
    if ball_radius is not None:
        norm = np.linalg.norm(pts, axis=1)
        pts = pts[norm <= ball_radius + r]
        norm = np.linalg.norm(pts, axis=1)
        out = norm > ball_radius
        pts[out] *= (ball_radius / norm[out])[:, None]
        pts = np.unique(np.round(pts, 12), axis=0)
    return pts


def sample_region(n, d, rng, box_half=None, ball_radius=None):
    if box_half is not None:
        return rng.uniform(-box_half, box_half, size=(n, d))
    g = rng.normal(size=(n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * ball_radius * rng.random((n, 1)) ** (1.0 / d)


def cover_radius(cover, region_points):
    """Largest distance from a region point to its nearest cover point."""
    d, _ = cKDTree(cover).query(region_points)
    return float(np.max(d))


def samples_per_point(sigma, eps, n, beta):
    """``ceil(32 sigma^2 / eps^2 * ln(2n / beta))``, at least one."""
    if sigma == 0:
        return 1
    return max(1, int(math.ceil(32.0 * sigma ** 2 / eps ** 2 * math.log(2.0 * n / beta))))


def truncated_noise(rng, sigma, size, bound=4.0):
    """Gaussian noise with scale ``sigma`` cut at ``+-bound * sigma``."""
    if sigma == 0:
        return np.zeros(size)
    x = rng.normal(size=size)
    bad = np.abs(x) > bound
    while np.any(bad):
        x[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(x) > bound
    return sigma * x


def predicted_ratio(d, D, delta, L, eps):
    """Covering-number ratio of a diameter-``D`` box to a radius-``delta`` ball."""
    return (D / (2.0 * delta)) ** d * math.log(1 + 2 * L * D / eps) / \
        math.log(1 + 4 * L * delta / eps)


def cone_value(a_star, L):
    a_star = np.asarray(a_star, dtype=np.float64)
    return lambda a: -L * np.linalg.norm(np.asarray(a) - a_star, axis=-1)


def identify(cover, f, m, sigma, rng, trials):
    """Run the cover procedure ``trials`` times; return the chosen indices."""
    fc = f(cover)
    picks = np.empty(trials, dtype=int)
    for t in range(trials):
        means = fc + truncated_noise(rng, sigma, (m, len(cover))).mean(axis=0)
        picks[t] = int(np.argmax(means))
    return picks


def verify_sample_complexity(d=1, eps=0.2, beta=0.1, sigma=0.1, delta_rho=0.5,
                             D=2.0, L=1.0, trials=200, seed=0, f=None,
                             a_star=None):
    """Cover-and-sample identification on the box and on the ball.

    Returns cover sizes, per-point sample counts, totals, empirical failure
    rates and measured versus predicted sample ratios. ``f`` defaults to the
    cone ``-L ||a - a_star||`` with ``a_star`` inside the ball.
    """
    if not (eps < L * delta_rho < L * D):
        raise DegenerateInstance("need eps < L * delta_rho < L * D")
    rng = make_rng(seed)
    if a_star is None:
        a_star = sample_region(1, d, rng, ball_radius=0.5 * delta_rho)[0]
    f = f or cone_value(a_star, L)
    r = eps / (2.0 * L)
    out = {"d": d, "eps": eps, "beta": beta, "sigma": sigma, "delta_rho": delta_rho,
           "D": D, "L": L, "r": r, "trials": trials}
    for name, kw in (("global", {"box_half": D / 2.0}),
                     ("res", {"ball_radius": delta_rho})):
        cover = lattice_cover(d, r, **kw)
        if len(cover) < 2:
            raise DegenerateInstance(f"{name} cover has a single point")
        m = samples_per_point(sigma, eps, len(cover), beta)
        picks = identify(cover, f, m, sigma, rng, trials)
        # best value over the region, approximated from a fine probe set
        probe = np.concatenate([sample_region(20000, d, rng, **kw), cover,
                                np.atleast_2d(a_star) if _inside(a_star, **kw) else
                                np.empty((0, d))])
        best = float(np.max(f(probe)))
        fail = f(cover[picks]) < best - eps
        out[f"cover_{name}"] = len(cover)
        out[f"m_{name}"] = m
        out[f"n_{name}"] = len(cover) * m
        out[f"failure_{name}"] = float(fail.mean())
    out["ratio"] = out["n_global"] / out["n_res"]
    out["predicted_ratio"] = predicted_ratio(d, D, delta_rho, L, eps)
    out["geometric_ratio"] = (D / (2.0 * delta_rho)) ** d
    return out


def _inside(a, box_half=None, ball_radius=None):
    if box_half is not None:
        return bool(np.all(np.abs(a) <= box_half))
    return bool(np.linalg.norm(a) <= ball_radius)


def hoeffding_failure(sigma, eps, m):
    """Per-point bound ``2 exp(-m eps^2 / (32 sigma^2))``."""
    return 2.0 * math.exp(-m * eps ** 2 / (32.0 * sigma ** 2))


# ---------------------------------------------------------------- localization

def ball_grid(center, radius, pitch, box=(-1.0, 1.0)):
    """Grid points of pitch ``pitch`` inside a ball, clipped to the action box."""
    d = len(center)
    axis = np.arange(-radius, radius + 0.5 * pitch, pitch)
    pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), -1).reshape(-1, d)
    pts = pts[np.linalg.norm(pts, axis=1) <= radius] + center
    keep = np.all((pts >= box[0]) & (pts <= box[1]), axis=1)
    return np.concatenate([pts[keep], center[None]])


def grid_tolerance(L, pitch, d):
    """Worst gap between a grid maximum and the true maximum."""
    return L * pitch * math.sqrt(d) / 2.0


def localization_bias(q, a_mu, a_base, delta_rho, pitch):
    """Measured ``eps_loc = max(0, q(a_mu) - max_{ball} q)`` by grid search."""
    grid = ball_grid(np.asarray(a_base, dtype=np.float64), delta_rho, pitch)
    return max(0.0, float(q(a_mu[None])[0] - np.max(q(grid))))


def verify_localization_bias(env, base, delta_rho, ds, n_states=500, pitch=0.01,
                             neighbors=32, seed=0):
    """Check the bias bound on ``n_states`` dataset states of a 2-D action task.

    ``a_mu(s)`` is the best oracle action among the logged actions of the
    ``neighbors`` nearest dataset states.
    """
    rng = make_rng(seed)
    d = ds.d_a
    L = env.lipschitz_L
    if not np.isfinite(L):
        raise ValueError("environment has no finite Lipschitz constant")
    idx = rng.choice(len(ds), n_states, replace=False)
    states = np.asarray(ds.states, dtype=np.float64)[idx]
    _, nb = cKDTree(ds.states).query(states, k=neighbors)
    if hasattr(base, "act"):
        a_base = base.act(states)
    else:
        a_base = np.asarray(base(states))
    tol = grid_tolerance(L, pitch, d)
    rows = []
    for i, s in enumerate(states):
        cand = np.asarray(ds.actions, dtype=np.float64)[nb[i]]
        s_rep = np.repeat(s[None], len(cand), axis=0)
        a_mu = cand[int(np.argmax(env.q_star(s_rep, cand)))]
        q = lambda a, s=s: env.q_star(np.repeat(s[None], len(a), axis=0), a)
        measured = localization_bias(q, a_mu, a_base[i], delta_rho, pitch)
        bound = L * max(0.0, float(np.linalg.norm(a_mu - a_base[i])) - delta_rho)
        rows.append((measured, bound))
    rows = np.array(rows)
    violation = rows[:, 0] - rows[:, 1]
    return {"eps_loc_measured": rows[:, 0], "bound": rows[:, 1],
            "max_violation": float(violation.max()), "tolerance": tol,
            "holds": bool(np.all(violation <= tol)),
            "inside_fraction": float(np.mean(rows[:, 1] == 0))}


def constructed_bias_case(delta_rho=0.5, excess=0.3, L=1.0, pitch=0.01, d=2):
    """``q = -L ||a - a_mu||`` with ``a_mu`` at ``delta_rho + excess`` from the anchor."""
    a_base = np.zeros(d)
    direction = np.ones(d) / math.sqrt(d)
    a_mu = a_base + (delta_rho + excess) * direction
    q = cone_value(a_mu, L)
    measured = localization_bias(q, a_mu, a_base, delta_rho, pitch)
    bound = L * excess
    tol = grid_tolerance(L, pitch, d)
    return {"eps_loc_measured": measured, "bound": bound, "tolerance": tol,
            "holds": measured <= bound + tol}


# ---------------------------------------------------------------- drift

class Circle:
    """Circle of radius ``R`` in the plane; curvature ``1/R``."""

    def __init__(self, R=1.0):
        self.R = float(R)
        self.kappa = 1.0 / self.R

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.R * np.stack([np.cos(t), np.sin(t)], axis=-1)

    def distance(self, x):
        return np.abs(np.linalg.norm(x, axis=-1) - self.R)

    def normal(self, t):
        return self.point(t) / self.R

    def chord_params(self, t0, c):
        """Parameter of the point at chord length ``c`` from ``point(t0)``."""
        return t0 + 2.0 * math.asin(c / (2.0 * self.R))


class SineCurve:
    """``y = A sin(w x)``; curvature peaks at ``A w^2`` on the crests."""

    def __init__(self, A=0.5, w=2.0):
        self.A, self.w = float(A), float(w)
        self.kappa = self.A * self.w ** 2

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.stack([t, self.A * np.sin(self.w * t)], axis=-1)

    def normal(self, t):
        dy = self.A * self.w * np.cos(self.w * t)
        n = np.stack([-dy, np.ones_like(dy)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def distance(self, x, iters=50):
        """Distance by Newton projection started from a local grid search."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        A, w = self.A, self.w
        span = np.linspace(-1.0, 1.0, 201)
        t = x[:, :1] + span[None, :] * (np.pi / w)
        d2 = (t - x[:, :1]) ** 2 + (A * np.sin(w * t) - x[:, 1:2]) ** 2
        t = t[np.arange(len(x)), np.argmin(d2, axis=1)]
        px, py = x[:, 0], x[:, 1]
        for _ in range(iters):
            s, c = np.sin(w * t), np.cos(w * t)
            g = (t - px) + (A * s - py) * A * w * c
            h = 1.0 + (A * w * c) ** 2 - (A * s - py) * A * w * w * s
            step = g / np.where(np.abs(h) > 1e-14, h, 1e-14)
            t = t - step
            if np.max(np.abs(step)) < 1e-15:
                break
        p = self.point(t)
        return np.linalg.norm(x - p, axis=-1)

    def chord_params(self, t0, c):
        """Parameter ``t1 > t0`` with ``||point(t1) - point(t0)|| = c`` (bisection)."""
        p0 = self.point(t0)
        lo, hi = t0, t0 + c
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.linalg.norm(self.point(mid) - p0) < c:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def chord_drift(manifold, t0, c, n_alpha=2001):
    """``sup_alpha d((1 - alpha) x + alpha y, M)`` for a chord of length ``c``."""
    if c == 0:
        return 0.0
    x = manifold.point(t0)
    y = manifold.point(manifold.chord_params(t0, c))
    alpha = np.linspace(0.0, 1.0, n_alpha)[:, None]
    return float(np.max(manifold.distance((1 - alpha) * x + alpha * y)))


def gradient_drift(manifold, t0, v, eta):
    """``d(x + eta v, M)`` for a step off the point ``x = point(t0)``."""
    x = np.atleast_2d(manifold.point(t0) + eta * np.asarray(v))
    return float(np.ravel(manifold.distance(x))[0])


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def verify_drift(manifold=None, chord_lengths=(0.2, 0.1, 0.05, 0.025),
                 etas=(0.2, 0.1, 0.05, 0.025), t0=None, v=None, seed=0,
                 min_normal=1e-6):
    """Chord drift versus gradient-step drift and their fitted exponents.

    A random step direction is redrawn while its normal component is below
    ``min_normal``; a mostly tangent step on a curved sheet mixes in the
    quadratic term and bends the fitted gradient slope.
    """
    manifold = manifold or Circle()
    if t0 is not None:
        start = lambda c: t0
    elif isinstance(manifold, SineCurve):
        # center each chord on a crest, where the curvature peaks
        crest = math.pi / (2.0 * manifold.w)
        start = lambda c: crest - 0.5 * c
        t0 = crest
    else:
        start = lambda c: 0.0
        t0 = 0.0
    rng = make_rng(seed)
    normal = manifold.normal(t0)
    if v is None:
        v = rng.normal(size=2)
        v /= np.linalg.norm(v)
    while abs(float(np.dot(v, normal))) < min_normal:
        v = rng.normal(size=2)
        v /= np.linalg.norm(v)
    chord = np.array([chord_drift(manifold, start(c), c) for c in chord_lengths])
    grad = np.array([gradient_drift(manifold, t0, v, e) for e in etas])
    bound = manifold.kappa / 8.0 * np.asarray(chord_lengths) ** 2
    return {"chord_lengths": list(chord_lengths), "etas": list(etas),
            "chord_drift": chord, "grad_drift": grad, "chord_bound": bound,
            "chord_slope": loglog_slope(chord_lengths, chord),
            "grad_slope": loglog_slope(etas, grad),
            "kappa": manifold.kappa, "v": v, "normal_component": float(np.dot(v, normal))}


def theory_checks(kind: str, result: dict) -> list:
    """``(name, passed)`` rows for one verification result."""
    rows = []
    if kind == "complexity":
        for tag, r in result.items():
            rows.append((f"{tag} failure_global <= beta", r["failure_global"] <= r["beta"]))
            rows.append((f"{tag} failure_res <= beta", r["failure_res"] <= r["beta"]))
            q = r["ratio"] / r["predicted_ratio"]
            rows.append((f"{tag} ratio within 2x of prediction", 0.5 <= q <= 2.0))
    elif kind == "drift":
        for tag, r in result.items():
            ok = bool(np.all(np.asarray(r["chord_drift"])
                             <= np.asarray(r["chord_bound"]) * 1.05))
            rows.append((f"{tag} chord drift <= (kappa/8) c^2 (1.05)", ok))
            rows.append((f"{tag} chord slope in [1.9, 2.1]",
                         1.9 <= r["chord_slope"] <= 2.1))
            rows.append((f"{tag} gradient slope in [0.9, 1.1]",
                         0.9 <= r["grad_slope"] <= 1.1))
    elif kind == "bias":
        rows.append(("probe bound holds", bool(result["probes"]["holds"])))
        rows.append(("constructed case holds", bool(result["constructed"]["holds"])))
    else:
        raise ValueError(f"unknown theory check {kind!r}")
    return rows
