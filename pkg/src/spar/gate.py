"""Stage III: accept a residual correction only if the critics predict a gain.

For each state the anchor action and up to ``K_infer`` residual candidates
are scored with the LCB of the rectification critics. The best candidate is
taken iff its gain clears both an absolute and a relative threshold;
otherwise the anchor action is returned unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .anchor import AnchorBundle, q_rob
from .nn import make_rng


@dataclass(frozen=True)
class GateConfig:
    eta_abs: float = 1e-4
    eta_rel: float = 0.01
    epsilon: float = 1e-8
    K_infer: int = None
    subset: str = "rect"

    def __post_init__(self):
        if self.K_infer is not None and self.K_infer < 1:
            raise ValueError("K_infer must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


ALWAYS_REJECT = GateConfig(eta_abs=1e9, eta_rel=1e9)
ALWAYS_ACCEPT = GateConfig(eta_abs=-1e9, eta_rel=-1e9)


class GateDecision(NamedTuple):
    chosen_action: np.ndarray
    accepted: bool
    base_q: float
    candidates: list
    best_index: int


class GateBatch(NamedTuple):
    """Vectorized decisions for ``n`` states and ``k`` candidates each."""
    chosen: np.ndarray      # (n, d_a)
    accepted: np.ndarray    # (n,)
    base_q: np.ndarray      # (n,)
    candidates: np.ndarray  # (n, k, d_a)
    delta_q: np.ndarray     # (n, k)
    rel_gain: np.ndarray    # (n, k)
    best: np.ndarray        # (n,)

    def decision(self, i) -> GateDecision:
        cands = [{"action": self.candidates[i, k], "delta_q": float(self.delta_q[i, k]),
                  "rel_gain": float(self.rel_gain[i, k])}
                 for k in range(self.candidates.shape[1])]
        return GateDecision(self.chosen[i], bool(self.accepted[i]),
                            float(self.base_q[i]), cands, int(self.best[i]))


def candidate_count(policy, cfg: GateConfig):
    if policy is None:
        return 0
    return policy.default_candidates if cfg.K_infer is None or \
        policy.default_candidates == 1 else cfg.K_infer


def gate_batch(bundle: AnchorBundle, policy, cfg: GateConfig, states, rng) -> GateBatch:
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = len(s)
    a_base = bundle.base_action(s)
    base = q_rob(bundle, s, a_base, cfg.subset).lcb
    k = candidate_count(policy, cfg)
    if k == 0:
        empty = np.zeros((n, 0))
        return GateBatch(a_base, np.zeros(n, bool), base,
                         np.zeros((n, 0, a_base.shape[1])), empty, empty,
                         np.zeros(n, int))
    deltas = policy.propose(bundle, s, a_base, k, rng)
    cand = np.clip(a_base[:, None, :] + deltas, -1.0, 1.0)
    q = q_rob(bundle, np.repeat(s, k, axis=0), cand.reshape(n * k, -1),
              cfg.subset).lcb.reshape(n, k)
    dq = q - base[:, None]
    rel = dq / (np.abs(base)[:, None] + cfg.epsilon)
    best = np.argmax(dq, axis=1)  # first maximum wins ties
    rows = np.arange(n)
    accepted = (dq[rows, best] > cfg.eta_abs) & (rel[rows, best] > cfg.eta_rel)
    chosen = np.where(accepted[:, None], cand[rows, best], a_base)
    return GateBatch(chosen, accepted, base, cand, dq, rel, best)


def gate_act(bundle: AnchorBundle, policy, cfg: GateConfig, s, rng) -> GateDecision:
    """Single-state decision."""
    return gate_batch(bundle, policy, cfg, np.atleast_2d(s), rng).decision(0)


@dataclass
class EvalResult:
    mean_return: float
    regret: float
    accept_rate: float
    success_rate: float = None
    records: list = None


def evaluate_policy(env, bundle, policy, cfg: GateConfig, episodes: int, seed: int,
                    keep_records=False) -> EvalResult:
    """Roll out the gated policy.

    Bandit tasks are one step long, so ``episodes`` states are scored at once
    against the oracle. The maze runs ``episodes`` rollouts in lock step and
    reports the success rate; its regret is ``1 - success``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = make_rng(seed)
    cand_rng = make_rng(seed + 1)
    records = [] if keep_records else None
    if not env.episodic:
        s = env.reset(episodes, rng)
        g = gate_batch(bundle, policy, cfg, s, cand_rng)
        r = env.q_star(s, g.chosen)
        if keep_records:
            _record(records, 0, g)
        return EvalResult(float(r.mean()), float(env.regret(s, g.chosen).mean()),
                          float(g.accepted.mean()), None, records)

    s = env.reset(episodes, rng)
    alive = np.ones(episodes, bool)
    ret = np.zeros(episodes)
    success = np.zeros(episodes, bool)
    acc = dec = 0
    for t in range(env.horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        g = gate_batch(bundle, policy, cfg, s[idx], cand_rng)
        acc += int(g.accepted.sum())
        dec += len(idx)
        if keep_records:
            _record(records, t, g)
        s2, r, done = env.step(s[idx], g.chosen)
        ret[idx] += r
        s[idx] = s2
        success[idx] |= env.at_goal(s2)
        alive[idx] = ~done
    rate = float(success.mean())
    return EvalResult(float(ret.mean()), 1.0 - rate, acc / max(dec, 1), rate, records)


def _record(records, step, g: GateBatch):
    rows = np.arange(len(g.best))
    for i in rows:
        b = g.best[i]
        has = g.delta_q.shape[1] > 0
        records.append({"step": step, "accepted": bool(g.accepted[i]),
                        "delta_q": float(g.delta_q[i, b]) if has else 0.0,
                        "rel_gain": float(g.rel_gain[i, b]) if has else 0.0,
                        "action": [float(x) for x in g.chosen[i]]})
