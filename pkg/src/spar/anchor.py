"""Stage I: behavior-cloned anchor policy and a pessimistic critic ensemble.

The anchor is fitted by plain squared error (or Gaussian likelihood) to the
logged actions. Critics regress in-sample targets
``r + gamma * mean_i Q'_i(s', pi_base(s'))`` with the expectile loss, and the
ensemble is read out as the lower confidence bound ``mean - lambda_u * std``.
After training everything is frozen: parameter arrays become read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import (GraphEnsemble, ParamGraph, Trainable, TrainingDivergence,
                 make_rng, mlp_spec, polyak_update)

SIGMA_FLOOR = 1e-6


class FrozenError(RuntimeError):
    """Raised on any attempt to modify a frozen model."""


@dataclass
class Stage1Config:
    steps: int = 1_000_000
    batch_size: int = 256
    hidden: tuple = (256, 256)
    lr: float = 3e-4
    polyak: float = 0.005
    gamma: float = 0.99
    expectile_tau: float = 0.5
    value_tau: float = 0.7
    n_critics: int = 10
    subset_size: int = 4
    lambda_u: float = 0.5
    policy_type: str = "deterministic"
    reward_shift: float = 0.0
    grad_clip: float = 1.0
    max_consecutive_errors: int = 10
    log_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("steps must be >= 0; batch_size and log_every >= 1")
        if not 0.0 < self.expectile_tau < 1.0 or not 0.0 < self.value_tau < 1.0:
            raise ValueError("expectile levels must lie in (0, 1)")
        if not 1 <= self.subset_size <= self.n_critics:
            raise ValueError("subset_size must lie in [1, n_critics]")
        if self.policy_type not in ("deterministic", "gaussian"):
            raise ValueError(f"unknown policy type {self.policy_type!r}")


def expectile_loss(residual, tau):
    """``|tau - 1{u < 0}| * u^2`` elementwise."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    u = np.asarray(residual, dtype=np.float64)
    return np.abs(tau - (u < 0)) * u * u


def expectile_grad(residual, tau):
    u = np.asarray(residual, dtype=np.float64)
    return 2.0 * np.abs(tau - (u < 0)) * u


class DivergenceGuard:
    """Skip non-finite batches; give up after ``limit`` in a row."""

    def __init__(self, limit=10, tag="training"):
        self.limit = limit
        self.tag = tag
        self.run = 0

    def ok(self, value, step):
        if np.all(np.isfinite(value)):
            self.run = 0
            return True
        self.run += 1
        if self.run >= self.limit:
            raise TrainingDivergence(
                f"{self.tag}: {self.run} consecutive non-finite losses, "
                f"last at step {step}")
        return False


def _freeze_array(a):
    a.flags.writeable = False
    return a


class _Freezable:
    _frozen = False

    def __setattr__(self, key, value):
        if self._frozen:
            raise FrozenError(f"cannot set {key!r} on a frozen {type(self).__name__}")
        object.__setattr__(self, key, value)


class BasePolicy(_Freezable):
    """Deterministic tanh-MLP anchor, or a Gaussian head whose mean is used."""

    def __init__(self, net: ParamGraph, kind: str, state_mean, state_std):
        if kind not in ("deterministic", "gaussian"):
            raise ValueError(f"unknown policy type {kind!r}")
        self.net = net
        self.kind = kind
        self.state_mean = np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.asarray(state_std, dtype=np.float64)
        self.d_a = net.n_out if kind == "deterministic" else net.n_out // 2

    @classmethod
    def create(cls, d_s, d_a, hidden, kind, state_mean, state_std, rng):
        if kind == "deterministic":
            sizes, acts = mlp_spec(d_s, hidden, d_a, out_activation="tanh")
        else:
            sizes, acts = mlp_spec(d_s, hidden, 2 * d_a)
        return cls(ParamGraph.init(sizes, acts, rng), kind, state_mean, state_std)

    def normalize(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def act(self, states):
        s = np.asarray(states, dtype=np.float64)
        out = self.net.forward(np.atleast_2d(self.normalize(s)))
        if self.kind == "gaussian":
            out = np.tanh(out[:, :self.d_a])
        return out[0] if s.ndim == 1 else out

    def bc_loss_and_grad(self, s_norm, actions):
        y, cache = self.net.forward_cache(s_norm)
        n = len(actions)
        if self.kind == "deterministic":
            diff = y - actions
            loss = np.sum(diff * diff) / n
            up = 2.0 * diff / n
        else:
            d = self.d_a
            mu = np.tanh(y[:, :d])
            raw = y[:, d:]
            log_std = np.clip(raw, -5.0, 2.0)
            inv_var = np.exp(-2.0 * log_std)
            diff = actions - mu
            loss = np.sum(0.5 * diff * diff * inv_var + log_std) / n
            g_mu = -diff * inv_var / n
            g_ls = (1.0 - diff * diff * inv_var) / n
            g_ls = g_ls * ((raw > -5.0) & (raw < 2.0))
            up = np.concatenate([g_mu * (1.0 - mu * mu), g_ls], axis=1)
        gp, _ = self.net.vjp(cache, up, need_x=False)
        return loss, gp


class QRob(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    lcb: np.ndarray


class CriticEnsemble(_Freezable):
    def __init__(self, members: GraphEnsemble, subsets: dict, gamma=0.99,
                 expectile_tau=0.5, targets: GraphEnsemble = None):
        m = len(members)
        for key in ("data", "guide", "rect"):
            idx = subsets[key]
            if not all(0 <= i < m for i in idx) or len(idx) < 1:
                raise ValueError(f"invalid critic subset {key}={idx}")
        self.members = members
        self.targets = targets if targets is not None else members.copy()
        self.subsets = {k: tuple(int(i) for i in v) for k, v in subsets.items()}
        self.gamma = float(gamma)
        self.expectile_tau = float(expectile_tau)
        self._views = {k: members.subset(v) for k, v in self.subsets.items()}
        self.query_log = None

    def __len__(self):
        return len(self.members)

    def refresh_views(self):
        object.__setattr__(self, "_views",
                           {k: self.members.subset(v) for k, v in self.subsets.items()})

    def view(self, subset):
        if subset is None or subset == "all":
            return self.members
        try:
            return self._views[subset]
        except KeyError:
            raise ValueError(f"unknown critic subset {subset!r}") from None


def default_subsets(m=10, size=4):
    """Disjoint data/guide subsets; the rect subset wraps around the ensemble."""
    idx = list(range(m))
    return {"data": idx[0:size], "guide": idx[size:2 * size],
            "rect": [(2 * size + i) % m for i in range(size)]}


class AnchorBundle(_Freezable):
    def __init__(self, base_policy: BasePolicy, critics: CriticEnsemble,
                 value_net: ParamGraph, lambda_u: float, state_mean, state_std,
                 meta=None):
        if lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        self.base_policy = base_policy
        self.critics = critics
        self.value_net = value_net
        self.lambda_u = float(lambda_u)
        self.state_mean = np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.asarray(state_std, dtype=np.float64)
        self.meta = dict(meta or {})
        self.frozen = False

    def freeze(self):
        self.critics.refresh_views()
        for arr in self.arrays():
            _freeze_array(arr)
        for v in self.critics._views.values():
            _freeze_array(v.params)
        self.frozen = True
        for obj in (self.base_policy, self.critics, self):
            object.__setattr__(obj, "_frozen", True)
        return self

    def arrays(self):
        return [self.base_policy.net.params, self.critics.members.params,
                self.critics.targets.params, self.value_net.params,
                self.base_policy.state_mean, self.base_policy.state_std,
                self.state_mean, self.state_std]

    def normalize(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def base_action(self, s):
        return self.base_policy.act(s)

    def critic_input(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return np.concatenate([self.normalize(s), a], axis=1)

    def q_values(self, s, a, subset=None):
        """Per-member values, shape ``(m, B)``."""
        return self.critics.view(subset).forward(self.critic_input(s, a))[..., 0]

    def lcb_and_action_grad(self, s, a, subset="guide"):
        """LCB values ``(B,)`` and their gradient w.r.t. the action ``(B, d_a)``."""
        ens = self.critics.view(subset)
        x = self.critic_input(s, a)
        y, cache = ens.forward_cache(x)
        q = y[..., 0]
        m = q.shape[0]
        mean = q.mean(axis=0)
        std = q.std(axis=0)
        lcb = mean - self.lambda_u * std
        up = 1.0 / m - self.lambda_u * (q - mean) / (m * np.maximum(std, 1e-12))
        _, gx = ens.vjp(cache, up[..., None])
        d_s = len(self.state_mean)
        return lcb, gx[:, d_s:]


def with_lambda_u(bundle: AnchorBundle, lambda_u: float) -> AnchorBundle:
    """Same frozen networks read out with a different uncertainty weight.

    ``lambda_u`` never enters Stage I training, so a trained bundle can be
    reused across uncertainty-weight settings.
    """
    if float(lambda_u) == bundle.lambda_u:
        return bundle
    out = AnchorBundle(bundle.base_policy, bundle.critics, bundle.value_net,
                       lambda_u, bundle.state_mean, bundle.state_std, bundle.meta)
    if bundle.frozen:
        out.frozen = True
        object.__setattr__(out, "_frozen", True)
    return out


def q_rob(bundle: AnchorBundle, s, a, subset="rect") -> QRob:
    """Ensemble mean, population std and lower confidence bound."""
    single = np.asarray(a).ndim == 1
    q = bundle.q_values(s, a, subset)
    mean = q.mean(axis=0)
    std = q.std(axis=0)
    lcb = mean - bundle.lambda_u * std
    if single:
        return QRob(float(mean[0]), float(std[0]), float(lcb[0]))
    return QRob(mean, std, lcb)


def normalized_advantage(bundle: AnchorBundle, s, a, a_base, subset="guide"):
    """``(lcb(s, a) - lcb(s, a_base)) / max(std(s, a_base), 1e-6)``."""
    single = np.asarray(a).ndim == 1
    s = np.atleast_2d(s)
    cand = q_rob(bundle, s, np.atleast_2d(a), subset)
    ref = q_rob(bundle, s, np.atleast_2d(a_base), subset)
    adv = (cand.lcb - ref.lcb) / np.maximum(ref.std, SIGMA_FLOOR)
    return float(adv[0]) if single else adv


def critic_loss_and_grad(members: GraphEnsemble, x, y, tau):
    """Per-member mean expectile loss toward targets ``y``, its parameter
    gradient ``(m, P)`` and the member predictions ``(m, B)``."""
    q, cache = members.forward_cache(x)
    q = q[..., 0]
    u = y[None, :] - q
    up = -expectile_grad(u, tau)[..., None] / len(y)
    g, _ = members.vjp(cache, up, need_x=False)
    return expectile_loss(u, tau).mean(axis=1), g, q


def value_loss_and_grad(value_net: ParamGraph, s_norm, q_sa, tau):
    """Expectile regression of ``V(s)`` toward the ensemble-mean ``Q(s, a)``."""
    v, cache = value_net.forward_cache(s_norm)
    u = q_sa - v[:, 0]
    g, _ = value_net.vjp(cache, (-expectile_grad(u, tau) / len(u))[:, None],
                         need_x=False)
    return float(expectile_loss(u, tau).mean()), g


def _new_bundle(ds, cfg: Stage1Config, rng):
    d_s, d_a = ds.d_s, ds.d_a
    base = BasePolicy.create(d_s, d_a, cfg.hidden, cfg.policy_type,
                             ds.state_mean, ds.state_std, rng)
    sizes, acts = mlp_spec(d_s + d_a, cfg.hidden, 1)
    members = GraphEnsemble.init(cfg.n_critics, sizes, acts, rng)
    critics = CriticEnsemble(members, default_subsets(cfg.n_critics, cfg.subset_size),
                             cfg.gamma, cfg.expectile_tau)
    vs, va = mlp_spec(d_s, cfg.hidden, 1)
    value = ParamGraph.init(vs, va, rng)
    meta = {"expectile_tau": cfg.expectile_tau, "gamma": cfg.gamma,
            "value_tau": cfg.value_tau, "policy_type": cfg.policy_type}
    return AnchorBundle(base, critics, value, cfg.lambda_u, ds.state_mean,
                        ds.state_std, meta)


def train_stage1(ds, cfg: Stage1Config, log=None, query_log=None) -> AnchorBundle:
    """Fit the anchor, critics and state-value net; return a frozen bundle.

    ``log`` receives dict rows every ``cfg.log_every`` steps. When
    ``query_log`` is a list, every bootstrap query ``(s', a')`` made for the
    critic targets is appended to it.
    """
    if ds.d_s < 1 or ds.d_a < 1:
        raise ValueError("dataset has empty state or action dimension")
    rng = make_rng(cfg.seed)
    bundle = _new_bundle(ds, cfg, rng)
    base_opt = Trainable(bundle.base_policy.net, cfg.lr, cfg.grad_clip)
    critic_opt = Trainable(bundle.critics.members, cfg.lr, cfg.grad_clip)
    value_opt = Trainable(bundle.value_net, cfg.lr, cfg.grad_clip)
    critics = bundle.critics
    guard = DivergenceGuard(cfg.max_consecutive_errors, "stage1")

    s_all = ds.normalize(ds.states)
    s2_all = ds.normalize(ds.next_states)
    r_all = ds.rewards + cfg.reward_shift
    nd_all = 1.0 - ds.dones.astype(np.float64)
    gamma = cfg.gamma
    tau = cfg.expectile_tau

    for step in range(1, cfg.steps + 1):
        idx = ds.sample(cfg.batch_size, rng)
        s, a = s_all[idx], ds.actions[idx]

        bc_loss, g_bc = bundle.base_policy.bc_loss_and_grad(s, a)

        y = r_all[idx].copy()
        live = nd_all[idx] > 0
        if live.any():
            s2 = s2_all[idx][live]
            a2 = bundle.base_policy.act(ds.next_states[idx][live])
            if query_log is not None:
                query_log.append((ds.next_states[idx][live].copy(), a2.copy()))
            q2 = critics.targets.forward(np.concatenate([s2, a2], axis=1))[..., 0]
            y[live] += gamma * q2.mean(axis=0)

        q_loss, g_q, q = critic_loss_and_grad(critics.members,
                                              np.concatenate([s, a], axis=1), y, tau)
        v_loss, g_v = value_loss_and_grad(bundle.value_net, s, q.mean(axis=0),
                                          cfg.value_tau)

        losses = np.array([bc_loss, q_loss.mean(), v_loss])
        if not guard.ok(losses, step):
            continue
        base_opt.apply(g_bc)
        critic_opt.apply(g_q)
        value_opt.apply(g_v)
        critics.targets.params[...] = polyak_update(
            critics.targets.params, critics.members.params, cfg.polyak)

        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            log({"phase": "stage1", "step": step, "bc_loss": float(bc_loss),
                 "q_loss": float(q_loss.mean()), "v_loss": float(v_loss)})

    return bundle.freeze()
