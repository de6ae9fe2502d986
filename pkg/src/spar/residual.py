"""Stage II residual policies around the frozen anchor.

Four variants share one data pipeline (anchor actions, clipped residual
targets and advantage weights are precomputed once for the whole dataset):

* ``mlp``  deterministic regressor plus gradient ascent on the LCB,
* ``cvae`` weighted-ELBO conditional VAE with no value guidance,
* ``proj`` the CVAE plus latent self-imitation: candidates decoded by an EMA
  target decoder are scored by the critics and regressed onto,
* ``plas`` a frozen pre-trained decoder driven by a latent actor that climbs
  the LCB gradient.

Each trainer exposes ``theta``, ``opt``, ``fit_loss_and_grad`` and
``guide_loss_and_grad`` so the conflict diagnostics can probe a live state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .anchor import AnchorBundle, DivergenceGuard, SIGMA_FLOOR, q_rob
from .nn import (AdamState, ParamGraph, adam_step, make_rng, mlp_spec,
                 polyak_update)
from .weighting import WeightingConfig, candidate_weights, weight

VARIANTS = ("mlp", "cvae", "plas", "proj")
LOGSTD_MIN, LOGSTD_MAX = -8.0, 4.0


class ContractViolation(RuntimeError):
    """A frozen component was about to be modified."""


@dataclass
class Stage2Config:
    variant: str = "proj"
    steps: int = 1_000_000
    batch_size: int = 256
    hidden: tuple = (256, 256)
    cvae_hidden: tuple = (256, 256, 256)
    latent_hidden: tuple = (256, 256)
    lr: float = 3e-4
    lambda_g: float = 0.5
    latent_dim: int = 16
    kl_weight: float = 0.5
    recon_weight: float = 1.0
    K: int = 64
    projection_period: int = 10
    ema_tau: float = 0.005
    guide_states: int = 256
    plas_pretrain_fraction: float = 0.5
    residual_clip: float = 2.0
    grad_clip: float = 1.0
    max_consecutive_errors: int = 10
    log_every: int = 1000
    seed: int = 0
    weighting: WeightingConfig = field(default_factory=WeightingConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown residual variant {self.variant!r}")
        if self.lambda_g < 0:
            raise ValueError("lambda_g must be >= 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("steps must be >= 0; batch_size and log_every >= 1")


# ---------------------------------------------------------------- data prep

class Prepared(NamedTuple):
    s_raw: np.ndarray
    s_norm: np.ndarray
    a_base: np.ndarray
    delta: np.ndarray
    adv: np.ndarray
    w: np.ndarray


def anchor_actions(bundle: AnchorBundle, states, chunk=8192):
    states = np.asarray(states, dtype=np.float64)
    return np.concatenate([bundle.base_action(states[i:i + chunk])
                           for i in range(0, len(states), chunk)])


def prepare(bundle: AnchorBundle, ds, weighting: WeightingConfig,
            residual_clip=2.0, chunk=8192) -> Prepared:
    """Anchor actions, clipped residual targets and fit weights for ``ds``."""
    s = np.asarray(ds.states, dtype=np.float64)
    a = np.asarray(ds.actions, dtype=np.float64)
    a_base = anchor_actions(bundle, s, chunk)
    adv = np.empty(len(s))
    for i in range(0, len(s), chunk):
        sl = slice(i, i + chunk)
        cand = q_rob(bundle, s[sl], a[sl], "data")
        ref = q_rob(bundle, s[sl], a_base[sl], "data")
        adv[sl] = (cand.lcb - ref.lcb) / np.maximum(ref.std, SIGMA_FLOOR)
    delta = np.clip(a - a_base, -residual_clip, residual_clip)
    return Prepared(s, bundle.normalize(s), a_base, delta, adv,
                    np.asarray(weight(weighting, adv), dtype=np.float64))


def _inputs(*parts):
    return np.concatenate(parts, axis=-1)


def _lcb_ascent_grad(bundle, s_raw, a_base, delta, lambda_g):
    """Loss ``-lambda_g * mean lcb(s, clip(a_base + delta))`` and d/d delta."""
    raw = a_base + delta
    a_synth = np.clip(raw, -1.0, 1.0)
    lcb, g_a = bundle.lcb_and_action_grad(s_raw, a_synth, "guide")
    n = len(delta)
    inside = (raw > -1.0) & (raw < 1.0)
    return -lambda_g * lcb.mean(), -lambda_g * g_a * inside / n


# ---------------------------------------------------------------- models

class ResidualMlp:
    default_candidates = 1

    def __init__(self, net: ParamGraph, lambda_g: float):
        self.net = net
        self.lambda_g = float(lambda_g)

    @classmethod
    def create(cls, d_s, d_a, hidden, lambda_g, rng):
        sizes, acts = mlp_spec(d_s + d_a, hidden, d_a)
        return cls(ParamGraph.init(sizes, acts, rng), lambda_g)

    def residual(self, s_norm, a_base):
        return self.net.forward(_inputs(s_norm, a_base))

    def propose(self, bundle, s_raw, a_base, k, rng):
        return self.residual(bundle.normalize(s_raw), a_base)[:, None, :]


class ResidualCvae:
    default_candidates = 10

    def __init__(self, encoder: ParamGraph, decoder: ParamGraph, latent_dim: int,
                 kl_weight=0.5, recon_weight=1.0):
        if encoder.n_out != 2 * latent_dim:
            raise ValueError("encoder must emit mean and log-std of the latent")
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = int(latent_dim)
        self.kl_weight = float(kl_weight)
        self.recon_weight = float(recon_weight)

    @classmethod
    def create(cls, d_s, d_a, hidden, latent_dim, rng, kl_weight=0.5,
               recon_weight=1.0):
        es, ea = mlp_spec(d_s + d_a, hidden, 2 * latent_dim)
        ds_, da_ = mlp_spec(d_s + d_a + latent_dim, hidden, d_a)
        return cls(ParamGraph.init(es, ea, rng), ParamGraph.init(ds_, da_, rng),
                   latent_dim, kl_weight, recon_weight)

    @property
    def d_a(self):
        return self.decoder.n_out

    def copy(self):
        return ResidualCvae(self.encoder.copy(), self.decoder.copy(),
                            self.latent_dim, self.kl_weight, self.recon_weight)

    def encode(self, s_norm, delta):
        out = self.encoder.forward(_inputs(s_norm, delta))
        d = self.latent_dim
        return out[:, :d], np.clip(out[:, d:], LOGSTD_MIN, LOGSTD_MAX)

    def decode(self, s_norm, a_base, z, params=None):
        net = self.decoder if params is None else ParamGraph(
            self.decoder.layer_sizes, self.decoder.activations, params)
        return net.forward(_inputs(s_norm, a_base, z))

    def decode_many(self, s_norm, a_base, z, params=None):
        """Decode ``z`` of shape ``(n, k, d_z)``; returns ``(n, k, d_a)``."""
        n, k, _ = z.shape
        rep = lambda x: np.repeat(x, k, axis=0)
        out = self.decode(rep(s_norm), rep(a_base), z.reshape(n * k, -1), params)
        return out.reshape(n, k, -1)

    def propose(self, bundle, s_raw, a_base, k, rng):
        z = rng.standard_normal((len(a_base), k, self.latent_dim))
        return self.decode_many(bundle.normalize(s_raw), a_base, z)


def cvae_loss_and_grads(model: ResidualCvae, s_norm, a_base, delta_gt, w, eps,
                        dec_params=None, need_encoder=True):
    """Weighted ELBO with reparameterization noise ``eps``.

    ``recon = mean_b w_b * ||decode - delta||^2`` (times the recon weight),
    ``kl = mean_b KL(q || N(0, I))`` unweighted, ``total = recon + beta * kl``.
    Returns ``(parts, grad_encoder, grad_decoder)``.
    """
    n = len(delta_gt)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,))
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    d = model.latent_dim
    enc_out, ecache = model.encoder.forward_cache(_inputs(s_norm, delta_gt))
    mu, raw_ls = enc_out[:, :d], enc_out[:, d:]
    log_std = np.clip(raw_ls, LOGSTD_MIN, LOGSTD_MAX)
    std = np.exp(log_std)
    z = mu + std * eps

    dec = model.decoder if dec_params is None else ParamGraph(
        model.decoder.layer_sizes, model.decoder.activations, dec_params)
    pred, dcache = dec.forward_cache(_inputs(s_norm, a_base, z))
    diff = pred - delta_gt
    rw = model.recon_weight
    recon = rw * np.mean(w * np.sum(diff * diff, axis=1))
    kl_each = 0.5 * np.sum(mu * mu + std * std - 1.0 - 2.0 * log_std, axis=1)
    kl = float(np.mean(kl_each))
    beta = model.kl_weight
    parts = {"recon": float(recon), "kl": kl, "total": float(recon + beta * kl)}

    up = 2.0 * rw * w[:, None] * diff / n
    g_dec, g_in = dec.vjp(dcache, up, need_x=need_encoder)
    if not need_encoder:
        return parts, None, g_dec
    g_z = g_in[:, -d:]
    g_mu = g_z + beta * mu / n
    g_ls = g_z * eps * std + beta * (std * std - 1.0) / n
    g_ls = g_ls * ((raw_ls > LOGSTD_MIN) & (raw_ls < LOGSTD_MAX))
    g_enc, _ = model.encoder.vjp(ecache, np.concatenate([g_mu, g_ls], axis=1),
                                 need_x=False)
    return parts, g_enc, g_dec


def cvae_loss(model: ResidualCvae, s_norm, a_base, delta_gt, w, rng):
    eps = rng.standard_normal((len(delta_gt), model.latent_dim))
    parts, _, _ = cvae_loss_and_grads(model, s_norm, a_base, delta_gt, w, eps)
    return parts


class Candidates(NamedTuple):
    z: np.ndarray       # (n, K, d_z)
    delta: np.ndarray   # (n, K, d_a)
    adv: np.ndarray     # (n, K)
    omega: np.ndarray   # (n, K)


def sample_candidates(target: ResidualCvae, bundle, s_raw, s_norm, a_base, K,
                      weighting: WeightingConfig, rng) -> Candidates:
    """Decode ``K`` prior samples per state with ``target`` and weight them."""
    n = len(a_base)
    z = rng.standard_normal((n, K, target.latent_dim))
    delta = target.decode_many(s_norm, a_base, z)
    a_k = np.clip(a_base[:, None, :] + delta, -1.0, 1.0)
    ref = q_rob(bundle, s_raw, a_base, "guide")
    cand = q_rob(bundle, np.repeat(s_raw, K, axis=0), a_k.reshape(n * K, -1), "guide")
    adv = (cand.lcb.reshape(n, K) - ref.lcb[:, None]) / \
        np.maximum(ref.std, SIGMA_FLOOR)[:, None]
    return Candidates(z, delta, adv, candidate_weights(weighting, adv))


def self_imitation_loss(pred, delta, omega):
    """``mean_s sum_k omega_k ||pred_k - delta_k||^2`` and its gradient in ``pred``.

    ``pred`` may be ``(n, 1, d_a)`` for an output shared by all candidates;
    the gradient then sums over them.
    """
    pred = np.asarray(pred, dtype=np.float64)
    n = delta.shape[0]
    diff = pred - delta
    loss = float(np.sum(omega * np.sum(diff * diff, axis=-1)) / n)
    g = 2.0 * omega[..., None] * diff / n
    if pred.shape[1] == 1 and delta.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return loss, g


def guide_loss_and_grad(model: ResidualCvae, s_norm, a_base, cand: Candidates,
                        dec_params=None):
    """``mean_s sum_k omega_k ||decode(z_k) - delta_k||^2``; omega, delta constant.

    Only the online decoder receives a gradient.
    """
    n, K, _ = cand.delta.shape
    dec = model.decoder if dec_params is None else ParamGraph(
        model.decoder.layer_sizes, model.decoder.activations, dec_params)
    rep = lambda x: np.repeat(x, K, axis=0)
    x = _inputs(rep(s_norm), rep(a_base), cand.z.reshape(n * K, -1))
    pred, cache = dec.forward_cache(x)
    loss, g_pred = self_imitation_loss(pred.reshape(n, K, -1), cand.delta, cand.omega)
    g, _ = dec.vjp(cache, g_pred.reshape(n * K, -1), need_x=False)
    return loss, g


@dataclass
class ProjState:
    online: ResidualCvae
    target: ResidualCvae
    K: int = 64
    projection_period: int = 10
    ema_tau: float = 0.005
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    lambda_g: float = 0.5
    enc_opt: AdamState = None
    dec_opt: AdamState = None
    default_candidates = 10

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.target.decoder.layer_sizes != self.online.decoder.layer_sizes:
            raise ValueError("target and online decoders differ in architecture")
        if self.enc_opt is None:
            self.enc_opt = AdamState.like(self.online.encoder.params)
        if self.dec_opt is None:
            self.dec_opt = AdamState.like(self.online.decoder.params)

    def propose(self, bundle, s_raw, a_base, k, rng):
        return self.online.propose(bundle, s_raw, a_base, k, rng)

    def ema(self):
        for t, o in ((self.target.encoder, self.online.encoder),
                     (self.target.decoder, self.online.decoder)):
            t.params[...] = polyak_update(t.params, o.params, self.ema_tau)


def latent_self_imitation_step(ps: ProjState, bundle, s, rng):
    """One standalone self-imitation update of the online decoder.

    Candidates come from the target decoder; the online decoder takes one
    Adam step on the weighted regression, then the target tracks it.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a_base = bundle.base_action(s)
    s_norm = bundle.normalize(s)
    cand = sample_candidates(ps.target, bundle, s, s_norm, a_base, ps.K,
                             ps.weighting, rng)
    loss, g = guide_loss_and_grad(ps.online, s_norm, a_base, cand)
    new, ps.dec_opt = adam_step(ps.dec_opt, ps.online.decoder.params, g)
    ps.online.decoder.params[...] = new
    ps.ema()
    return loss


class PlasActor:
    """Latent actor over a decoder that is read-only for its whole life."""

    default_candidates = 1

    def __init__(self, latent: ParamGraph, decoder: ParamGraph, lambda_g=0.5):
        decoder.params.flags.writeable = False
        self.latent = latent
        self._decoder = decoder
        self.lambda_g = float(lambda_g)

    @property
    def decoder(self):
        return self._decoder

    @decoder.setter
    def decoder(self, value):
        raise ContractViolation("the PLAS decoder is frozen")

    def latent_code(self, s_norm, a_base, params=None):
        net = self.latent if params is None else ParamGraph(
            self.latent.layer_sizes, self.latent.activations, params)
        return net.forward(_inputs(s_norm, a_base))

    def residual(self, s_norm, a_base):
        return self.decoder.forward(
            _inputs(s_norm, a_base, self.latent_code(s_norm, a_base)))

    def propose(self, bundle, s_raw, a_base, k, rng):
        return self.residual(bundle.normalize(s_raw), a_base)[:, None, :]


# ---------------------------------------------------------------- trainers

class _Trainer:
    """Shared loop: batch sampling, divergence guard and logging."""

    phase = "stage2"

    def __init__(self, bundle: AnchorBundle, ds, cfg: Stage2Config,
                 prep: Prepared = None, weighting=None):
        self.bundle = bundle
        self.cfg = cfg
        self.weighting = weighting or cfg.weighting
        self.prep = prep if prep is not None else prepare(
            bundle, ds, self.weighting, cfg.residual_clip)
        self.rng = make_rng(cfg.seed)
        self.guide_rng = make_rng(cfg.seed + 7919)
        self.guard = DivergenceGuard(cfg.max_consecutive_errors, self.phase)
        self.step_count = 0
        self.history = []

    def batch(self):
        return self.rng.integers(0, len(self.prep.s_raw), size=self.cfg.batch_size)

    def run(self, steps, log=None):
        end = self.step_count + steps
        for _ in range(steps):
            self.step_count += 1
            row = self.train_step(self.batch())
            if row is None:
                continue
            if log is not None and (self.step_count % self.cfg.log_every == 0
                                    or self.step_count == end):
                log({"phase": self.phase, "step": self.step_count, **row})
        return self


class MlpTrainer(_Trainer):
    phase = "stage2-mlp"

    def __init__(self, bundle, ds, cfg, prep=None):
        super().__init__(bundle, ds, cfg, prep)
        init_rng = make_rng(cfg.seed + 1)
        self.policy = ResidualMlp.create(bundle.base_policy.net.n_in,
                                         self.prep.a_base.shape[1],
                                         cfg.hidden, cfg.lambda_g, init_rng)
        self.opt = AdamState.like(self.theta, learning_rate=cfg.lr,
                                  grad_clip_norm=cfg.grad_clip)

    @property
    def theta(self):
        return self.policy.net.params

    def _net(self, params):
        net = self.policy.net
        return net if params is None else ParamGraph(net.layer_sizes,
                                                     net.activations, params)

    def fit_loss_and_grad(self, idx, params=None, noise=None):
        p = self.prep
        net = self._net(params)
        pred, cache = net.forward_cache(_inputs(p.s_norm[idx], p.a_base[idx]))
        diff = pred - p.delta[idx]
        w = p.w[idx]
        n = len(idx)
        loss = float(np.mean(w * np.sum(diff * diff, axis=1)))
        g, _ = net.vjp(cache, 2.0 * w[:, None] * diff / n, need_x=False)
        return loss, g

    def guide_loss_and_grad(self, idx, params=None, rng=None):
        lam = self.policy.lambda_g
        if lam == 0:
            return 0.0, np.zeros_like(self.theta)
        p = self.prep
        net = self._net(params)
        pred, cache = net.forward_cache(_inputs(p.s_norm[idx], p.a_base[idx]))
        loss, g_delta = _lcb_ascent_grad(self.bundle, p.s_raw[idx], p.a_base[idx],
                                         pred, lam)
        g, _ = net.vjp(cache, g_delta, need_x=False)
        return float(loss), g

    def train_step(self, idx):
        fit, g_fit = self.fit_loss_and_grad(idx)
        guide, g_guide = self.guide_loss_and_grad(idx)
        g = g_fit + g_guide
        if not self.guard.ok([fit, guide, g.sum()], self.step_count):
            return None
        self.policy.net.params[...], self.opt = adam_step(self.opt, self.theta, g)
        return {"fit_loss": fit, "guide_loss": guide}

    def result(self):
        return self.policy


class ProjTrainer(_Trainer):
    """SPAR-PROJ; with ``lambda_g == 0`` it is plain weighted-ELBO CVAE."""

    phase = "stage2-proj"

    def __init__(self, bundle, ds, cfg, prep=None, weighting=None):
        super().__init__(bundle, ds, cfg, prep, weighting)
        init_rng = make_rng(cfg.seed + 1)
        online = ResidualCvae.create(bundle.base_policy.net.n_in,
                                     self.prep.a_base.shape[1], cfg.cvae_hidden,
                                     cfg.latent_dim, init_rng, cfg.kl_weight,
                                     cfg.recon_weight)
        mk = lambda p: AdamState.like(p, learning_rate=cfg.lr,
                                      grad_clip_norm=cfg.grad_clip)
        self.state = ProjState(online, online.copy(), cfg.K,
                               cfg.projection_period, cfg.ema_tau,
                               self.weighting, cfg.lambda_g,
                               mk(online.encoder.params), mk(online.decoder.params))
        self.kl_trace = []

    @property
    def theta(self):
        return self.state.online.decoder.params

    @property
    def opt(self):
        return self.state.dec_opt

    def noise(self, idx):
        return self.rng.standard_normal((len(idx), self.cfg.latent_dim))

    def fit_loss_and_grad(self, idx, params=None, noise=None):
        """Weighted reconstruction only (KL excluded), decoder gradient."""
        p = self.prep
        eps = self.noise(idx) if noise is None else noise
        parts, _, g = cvae_loss_and_grads(self.state.online, p.s_norm[idx],
                                          p.a_base[idx], p.delta[idx], p.w[idx],
                                          eps, dec_params=params,
                                          need_encoder=False)
        return parts["recon"], g

    def guide_states(self, idx):
        return idx[:self.cfg.guide_states]

    def guide_loss_and_grad(self, idx, params=None, rng=None):
        """``lambda_g`` times the self-imitation loss on the leading states."""
        ps = self.state
        if ps.lambda_g == 0:
            return 0.0, np.zeros_like(self.theta)
        p = self.prep
        gi = self.guide_states(idx)
        cand = sample_candidates(ps.target, self.bundle, p.s_raw[gi], p.s_norm[gi],
                                 p.a_base[gi], ps.K, ps.weighting,
                                 rng if rng is not None else self.guide_rng)
        loss, g = guide_loss_and_grad(ps.online, p.s_norm[gi], p.a_base[gi], cand,
                                      dec_params=params)
        return ps.lambda_g * loss, ps.lambda_g * g

    def train_step(self, idx):
        p, ps = self.prep, self.state
        eps = self.noise(idx)
        parts, g_enc, g_dec = cvae_loss_and_grads(
            ps.online, p.s_norm[idx], p.a_base[idx], p.delta[idx], p.w[idx], eps)
        guide = 0.0
        if ps.lambda_g > 0 and self.step_count % ps.projection_period == 0:
            guide, g_guide = self.guide_loss_and_grad(idx)
            g_dec = g_dec + g_guide
        if not self.guard.ok([parts["total"], guide], self.step_count):
            return None
        enc, dec = ps.online.encoder, ps.online.decoder
        enc.params[...], ps.enc_opt = adam_step(ps.enc_opt, enc.params, g_enc)
        dec.params[...], ps.dec_opt = adam_step(ps.dec_opt, dec.params, g_dec)
        ps.ema()
        self.kl_trace.append(parts["kl"])
        return {"fit_loss": parts["recon"], "kl": parts["kl"],
                "total_loss": parts["total"], "guide_loss": guide}

    def result(self):
        return self.state


class PlasTrainer(_Trainer):
    """Phase 1 fits a hard-filtered CVAE; phase 2 trains the latent actor."""

    phase = "stage2-plas"

    def __init__(self, bundle, ds, cfg, prep=None):
        wcfg = WeightingConfig("exponential", "hard", cfg.weighting.temperature,
                               cfg.weighting.weight_clip)
        super().__init__(bundle, ds, cfg, prep, wcfg)
        pre_cfg = _replace(cfg, lambda_g=0.0)
        self.pretrainer = ProjTrainer(bundle, ds, pre_cfg, self.prep, wcfg)
        self.pretrain_steps = int(round(cfg.steps * cfg.plas_pretrain_fraction))
        self.actor = None
        self.opt = None

    def pretrain(self, log=None):
        self.pretrainer.run(self.pretrain_steps, log)
        decoder = self.pretrainer.state.online.decoder.copy()
        d_z = self.cfg.latent_dim
        sizes, acts = mlp_spec(self.bundle.base_policy.net.n_in + self.prep.a_base.shape[1],
                               self.cfg.latent_hidden, d_z)
        latent = ParamGraph.init(sizes, acts, make_rng(self.cfg.seed + 2))
        W, b = latent.layers()[-1]
        W[...] = 0.0
        b[...] = 0.0
        self.actor = PlasActor(latent, decoder, self.cfg.lambda_g)
        self.opt = AdamState.like(latent.params, learning_rate=self.cfg.lr,
                                  grad_clip_norm=self.cfg.grad_clip)
        return self

    @property
    def theta(self):
        return self.actor.latent.params

    def _through(self, idx, params):
        """Latent forward then frozen decoder forward, caches kept."""
        p, actor = self.prep, self.actor
        lat = actor.latent if params is None else ParamGraph(
            actor.latent.layer_sizes, actor.latent.activations, params)
        z, lcache = lat.forward_cache(_inputs(p.s_norm[idx], p.a_base[idx]))
        pred, dcache = actor.decoder.forward_cache(_inputs(p.s_norm[idx],
                                                           p.a_base[idx], z))
        return lat, lcache, pred, dcache

    def _back(self, lat, lcache, dcache, up):
        _, g_in = self.actor.decoder.vjp(dcache, up)
        g, _ = lat.vjp(lcache, g_in[:, -self.cfg.latent_dim:], need_x=False)
        return g

    def fit_loss_and_grad(self, idx, params=None, noise=None):
        p = self.prep
        lat, lcache, pred, dcache = self._through(idx, params)
        diff = pred - p.delta[idx]
        w = p.w[idx]
        loss = float(np.mean(w * np.sum(diff * diff, axis=1)))
        return loss, self._back(lat, lcache, dcache, 2.0 * w[:, None] * diff / len(idx))

    def guide_loss_and_grad(self, idx, params=None, rng=None):
        lam = self.actor.lambda_g
        if lam == 0:
            return 0.0, np.zeros_like(self.theta)
        p = self.prep
        lat, lcache, pred, dcache = self._through(idx, params)
        loss, g_delta = _lcb_ascent_grad(self.bundle, p.s_raw[idx], p.a_base[idx],
                                         pred, lam)
        return float(loss), self._back(lat, lcache, dcache, g_delta)

    def train_step(self, idx):
        guide, g = self.guide_loss_and_grad(idx)
        if not self.guard.ok([guide, g.sum()], self.step_count):
            return None
        self.actor.latent.params[...], self.opt = adam_step(self.opt, self.theta, g)
        return {"guide_loss": guide}

    def run(self, steps, log=None):
        if self.actor is None:
            self.pretrain(log)
        return super().run(steps, log)

    def result(self):
        return self.actor


def _replace(cfg: Stage2Config, **kw):
    from dataclasses import replace
    return replace(cfg, **kw)


TRAINERS = {"mlp": MlpTrainer, "cvae": ProjTrainer, "proj": ProjTrainer,
            "plas": PlasTrainer}


def make_trainer(bundle, ds, cfg: Stage2Config, prep=None):
    if cfg.variant == "cvae":
        cfg = _replace(cfg, lambda_g=0.0)
    return TRAINERS[cfg.variant](bundle, ds, cfg, prep)


def phase2_steps(cfg: Stage2Config):
    if cfg.variant == "plas":
        return cfg.steps - int(round(cfg.steps * cfg.plas_pretrain_fraction))
    return cfg.steps


def train_residual(bundle, ds, cfg: Stage2Config, log=None, prep=None):
    """Train the configured variant and return its policy object."""
    if not bundle.frozen:
        raise ContractViolation("Stage II requires a frozen anchor bundle")
    tr = make_trainer(bundle, ds, cfg, prep)
    tr.run(phase2_steps(cfg), log)
    return tr.result()


def train_spar_mlp(bundle, ds, cfg, log=None):
    return train_residual(bundle, ds, _replace(cfg, variant="mlp"), log)


def train_spar_cvae(bundle, ds, cfg, log=None):
    return train_residual(bundle, ds, _replace(cfg, variant="cvae"), log)


def train_spar_proj(bundle, ds, cfg, log=None):
    return train_residual(bundle, ds, _replace(cfg, variant="proj"), log)


def train_spar_plas(bundle, ds, cfg, log=None):
    return train_residual(bundle, ds, _replace(cfg, variant="plas"), log)
