"""Small reverse-mode differentiable networks on top of numpy.

Every network in the pipeline is a stack of dense layers, so backprop is
written out by hand for that one shape instead of going through a general
graph tracer. Parameters live in a single flat float64 vector laid out as
``W_0, b_0, W_1, b_1, ...`` with each ``W_l`` stored row-major as
``(in_l, out_l)``.

:class:`GraphEnsemble` holds ``M`` networks of identical architecture as a
``(M, P)`` array and evaluates them with batched matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class TrainingDivergence(RuntimeError):
    """Raised when a non-finite gradient or loss shows up during training."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator used everywhere for reproducibility."""
    return np.random.Generator(np.random.Philox(int(seed)))


def mlp_spec(n_in: int, hidden: Sequence[int], n_out: int,
             activation: str = "relu", out_activation: str = "identity"):
    sizes = [int(n_in), *map(int, hidden), int(n_out)]
    acts = [activation] * len(hidden) + [out_activation]
    return sizes, acts


def count_params(layer_sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


def _check_arch(layer_sizes, activations):
    if len(layer_sizes) < 2 or any(int(n) < 1 for n in layer_sizes):
        raise ValueError(f"bad layer sizes {layer_sizes!r}")
    if len(activations) != len(layer_sizes) - 1:
        raise ValueError("need one activation per layer")
    for a in activations:
        if a not in ACTIVATIONS:
            raise ValueError(f"unknown activation {a!r}")


def _unpack(params: np.ndarray, layer_sizes):
    """Views ``(W, b)`` into ``params``; a leading member axis is kept."""
    lead = params.shape[:-1]
    out = []
    off = 0
    for i, o in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = params[..., off:off + i * o].reshape(*lead, i, o)
        off += i * o
        b = params[..., off:off + o]
        off += o
        out.append((W, b))
    return out


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, h, g):
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - h * h)
    return g


def _forward(params, layer_sizes, activations, x, keep=False):
    h = x
    cache = [x] if keep else None
    for (W, b), act in zip(_unpack(params, layer_sizes), activations):
        z = h @ W + b[..., None, :]
        h = _act(act, z)
        if keep:
            cache.append((z, h))
    return h, cache


def _backward(params, layer_sizes, activations, cache, upstream, need_x=True):
    weights = _unpack(params, layer_sizes)
    grad = np.zeros(params.shape)
    gw = _unpack(grad, layer_sizes)
    g = upstream
    x = cache[0]
    for li in range(len(weights) - 1, -1, -1):
        z, h = cache[li + 1]
        g = _act_grad(activations[li], z, h, g)
        inp = x if li == 0 else cache[li][1]
        gW, gb = gw[li]
        gW[...] = np.swapaxes(inp, -1, -2) @ g if inp.ndim == g.ndim else \
            np.einsum("bi,...bo->...io", inp, g)
        gb[...] = g.sum(axis=-2)
        if li > 0 or need_x:
            g = g @ np.swapaxes(weights[li][0], -1, -2)
    return grad, (g if need_x else None)


class ParamGraph:
    """A dense feed-forward network with a flat parameter vector."""

    def __init__(self, layer_sizes, activations, params=None):
        layer_sizes = [int(n) for n in layer_sizes]
        activations = list(activations)
        _check_arch(layer_sizes, activations)
        self.layer_sizes = layer_sizes
        self.activations = activations
        self.param_count = count_params(layer_sizes)
        if params is None:
            params = np.zeros(self.param_count)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_count,):
            raise ValueError(
                f"expected {self.param_count} params, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, layer_sizes, activations, rng: np.random.Generator):
        """Fan-in uniform init: every entry in ``±sqrt(1/fan_in)``."""
        g = cls(layer_sizes, activations)
        for W, b in _unpack(g.params, g.layer_sizes):
            bound = np.sqrt(1.0 / W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        return g

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def layers(self):
        return _unpack(self.params, self.layer_sizes)

    def copy(self):
        return ParamGraph(self.layer_sizes, self.activations, self.params.copy())

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_in:
            raise ValueError(
                f"input of shape {x.shape} does not match n_in={self.n_in}")
        return x

    def forward(self, x):
        x = self._as_batch(x)
        y, _ = _forward(self.params, self.layer_sizes, self.activations,
                        np.atleast_2d(x))
        return y[0] if x.ndim == 1 else y

    def forward_cache(self, x):
        x = self._as_batch(np.atleast_2d(x))
        return _forward(self.params, self.layer_sizes, self.activations, x,
                        keep=True)

    def vjp(self, cache, upstream, need_x=True):
        """Gradients of ``sum(upstream * y)`` from a cached forward pass."""
        return _backward(self.params, self.layer_sizes, self.activations,
                         cache, np.asarray(upstream, dtype=np.float64), need_x)

    def backward(self, x, upstream):
        """Return ``(grad_params, grad_x)`` of ``<upstream, forward(x)>``."""
        x = self._as_batch(x)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape[-1] != self.n_out or upstream.ndim != x.ndim:
            raise ValueError("upstream does not match the output shape")
        _, cache = self.forward_cache(x)
        gp, gx = self.vjp(cache, np.atleast_2d(upstream))
        return gp, (gx[0] if x.ndim == 1 else gx)


class GraphEnsemble:
    """``M`` networks with one architecture, stored as a ``(M, P)`` array.

    Inputs of shape ``(B, in)`` are shared across members; ``(M, B, in)``
    gives each member its own batch. Outputs are always ``(M, B, out)``.
    """

    def __init__(self, layer_sizes, activations, params):
        layer_sizes = [int(n) for n in layer_sizes]
        _check_arch(layer_sizes, activations)
        self.layer_sizes = layer_sizes
        self.activations = list(activations)
        self.param_count = count_params(layer_sizes)
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 2 or params.shape[1] != self.param_count:
            raise ValueError("ensemble params must be (M, param_count)")
        self.params = params

    @classmethod
    def init(cls, m, layer_sizes, activations, rng):
        rows = [ParamGraph.init(layer_sizes, activations, rng).params
                for _ in range(m)]
        return cls(layer_sizes, activations, np.stack(rows))

    def __len__(self):
        return self.params.shape[0]

    def member(self, i) -> ParamGraph:
        """A :class:`ParamGraph` sharing memory with row ``i``."""
        return ParamGraph(self.layer_sizes, self.activations, self.params[i])

    def copy(self):
        return GraphEnsemble(self.layer_sizes, self.activations,
                             self.params.copy())

    def subset(self, idx):
        return GraphEnsemble(self.layer_sizes, self.activations,
                             self.params[list(idx)])

    def forward(self, x):
        y, _ = _forward(self.params, self.layer_sizes, self.activations,
                        np.asarray(x, dtype=np.float64))
        return y

    def forward_cache(self, x):
        return _forward(self.params, self.layer_sizes, self.activations,
                        np.asarray(x, dtype=np.float64), keep=True)

    def vjp(self, cache, upstream, need_x=True):
        gp, gx = _backward(self.params, self.layer_sizes, self.activations,
                           cache, upstream, need_x)
        if need_x and cache[0].ndim == 2:
            gx = gx.sum(axis=0)
        return gp, gx


@dataclass
class AdamState:
    param_count: int
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    step: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)
    shape: tuple = None

    def __post_init__(self):
        if self.shape is None:
            self.shape = (int(self.param_count),)
        if self.first_moment is None:
            self.first_moment = np.zeros(self.shape)
        if self.second_moment is None:
            self.second_moment = np.zeros(self.shape)

    @classmethod
    def like(cls, params: np.ndarray, **kw):
        params = np.asarray(params)
        return cls(param_count=params.shape[-1], shape=params.shape, **kw)

    def copy(self):
        return replace(self, first_moment=self.first_moment.copy(),
                       second_moment=self.second_moment.copy())


def clip_by_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale each network's gradient to global norm ``<= max_norm``.

    For a 2-D array every row is a separate network and is clipped alone.
    """
    if max_norm is None or max_norm <= 0:
        return grads
    norm = np.sqrt(np.sum(grads * grads, axis=-1, keepdims=True))
    scale = np.minimum(1.0, max_norm / np.maximum(norm, 1e-300))
    return grads * scale


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update after global-norm clipping.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != state.shape or grads.shape != state.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads "
                         f"{grads.shape}, state {state.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergence(
            f"non-finite gradient at optimizer step {state.step + 1}")
    g = clip_by_global_norm(grads, state.grad_clip_norm)
    t = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, step=t, first_moment=m, second_moment=v)


def polyak_update(target: np.ndarray, online: np.ndarray, tau: float):
    """``(1 - tau) * target + tau * online``."""
    target = np.asarray(target, dtype=np.float64)
    online = np.asarray(online, dtype=np.float64)
    if target.shape != online.shape:
        raise ValueError("target and online shapes differ")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    return (1.0 - tau) * target + tau * online


class Trainable:
    """Parameters plus their Adam state, updated in place by :meth:`apply`."""

    def __init__(self, net, lr=3e-4, clip=1.0):
        self.net = net
        self.opt = AdamState.like(net.params, learning_rate=lr,
                                  grad_clip_norm=clip)

    def apply(self, grads):
        new, self.opt = adam_step(self.opt, self.net.params, grads)
        self.net.params[...] = new
