"""Sample weights built from the normalized advantage.

Two independent axes: *sensitivity* decides the raw magnitude (flat or
``exp(A/T)``), *filter* decides whether non-improving samples survive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SENSITIVITIES = ("uniform", "exponential")
FILTERS = ("soft", "hard")


@dataclass(frozen=True)
class WeightingConfig:
    sensitivity: str = "exponential"
    filter: str = "soft"
    temperature: float = 0.3
    weight_clip: float = 100.0

    def __post_init__(self):
        if self.sensitivity not in SENSITIVITIES:
            raise ValueError(f"unknown sensitivity {self.sensitivity!r}")
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not self.weight_clip >= 1:
            raise ValueError("weight_clip must be >= 1")


def weight(cfg: WeightingConfig, a_tilde):
    """Raw (unnormalized) weight for each advantage value."""
    a = np.asarray(a_tilde, dtype=np.float64)
    if cfg.sensitivity == "exponential":
        # clip the exponent first so exp never overflows
        w = np.exp(np.minimum(a / cfg.temperature, np.log(cfg.weight_clip)))
        w = np.minimum(w, cfg.weight_clip)
    else:
        w = np.ones_like(a)
    if cfg.filter == "hard":
        w = w * (a > 0)
    return float(w) if w.ndim == 0 else w


def normalize_weights(ws, a_tilde=None):
    """Normalize along the last axis.

    Rows summing to zero (everything filtered) become one-hot on the largest
    advantage, or on the largest weight when no advantages are given. Ties
    go to the lowest index.
    """
    w = np.asarray(ws, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum(axis=-1, keepdims=True)
    out = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    dead = (total[..., 0] <= 0)
    if np.any(dead):
        key = w if a_tilde is None else np.asarray(a_tilde, dtype=np.float64)
        best = np.argmax(key, axis=-1)
        onehot = np.zeros_like(w)
        np.put_along_axis(onehot, np.asarray(best)[..., None], 1.0, axis=-1)
        out = np.where(dead[..., None], onehot, out)
    return out


def candidate_weights(cfg: WeightingConfig, a_tilde):
    """``omega_k`` for a ``(..., K)`` advantage table."""
    return normalize_weights(weight(cfg, a_tilde), a_tilde)
