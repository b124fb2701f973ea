"""Density regression loss, rank-aware contrastive loss, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

DEFAULT_THRESHOLDS = (0.8, 0.6, 0.4)


def counting_loss(pred: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """Squared error summed over pixels, averaged over the leading batch axis."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ShapeError(f"counting loss: prediction {pred.shape} vs target {tgt.shape}")
    diff = pred - T.tensor(tgt)
    batch = pred.shape[0] if pred.ndim == 4 else 1
    return (diff * diff).sum() * (1.0 / batch)


def normalize_gt(density: np.ndarray, patch: int) -> np.ndarray:
    """Max-pool a ``(B×)1×H×W`` or ``H×W`` density to the patch grid, then min-max to [0, 1].

    Each map is normalised on its own; a constant map becomes all zeros.
    """
    d = np.asarray(density, dtype=np.float64)
    squeeze = d.ndim == 2
    if squeeze:
        d = d[None, None]
    elif d.ndim == 3:
        d = d[None]
    b, _, h, w = d.shape
    if h % patch or w % patch:
        raise ShapeError(f"density {h}x{w} is not divisible by patch size {patch}")
    pooled = d[:, 0].reshape(b, h // patch, patch, w // patch, patch).max(axis=(2, 4))
    lo = pooled.min(axis=(1, 2), keepdims=True)
    hi = pooled.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (pooled - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out[0] if squeeze else out


@dataclass
class RankSets:
    """Boolean positive masks, one ``B×h×w`` layer per threshold; negatives are the complement."""

    thresholds: tuple[float, ...]
    positive: np.ndarray  # K×B×h×w

    @property
    def negative(self) -> np.ndarray:
        return ~self.positive


def build_rank_sets(norm_gt: np.ndarray, thresholds=DEFAULT_THRESHOLDS) -> RankSets:
    g = np.asarray(norm_gt, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    pos = np.stack([g > r for r in thresholds])
    return RankSets(tuple(float(r) for r in thresholds), pos)


def rank_contrastive_loss(counting_map: Tensor, sets: RankSets, tau: float = 1.0) -> Tensor:
    """Sum over thresholds of ``-log(Σ_pos exp(s/τ) / Σ_all exp(s/τ))``, averaged over the batch.

    Thresholds whose positive set is empty for an image contribute nothing.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    s = counting_map if counting_map.ndim == 3 else counting_map.reshape(1, *counting_map.shape)
    b = s.shape[0]
    if sets.positive.shape[1:] != s.shape:
        raise ShapeError(f"rank sets {sets.positive.shape[1:]} do not match counting map {s.shape}")
    logits = s.reshape(b, -1) * (1.0 / tau)
    everything = np.ones(logits.shape, dtype=bool)
    total = None
    for pos in sets.positive:
        flat = pos.reshape(b, -1)
        rows = np.flatnonzero(flat.any(axis=1))
        if rows.size == 0:
            continue
        sel = logits if rows.size == b else logits[rows]
        term = (T.masked_logsumexp(sel, everything[rows]) - T.masked_logsumexp(sel, flat[rows])).sum()
        total = term if total is None else total + term
    if total is None:
        return (logits * 0.0).sum()
    return total * (1.0 / b)


@dataclass
class LossBundle:
    count: Tensor
    rank: Tensor
    total: Tensor
    lam: float


def total_loss(l_count: Tensor, l_rank: Tensor, lam: float = 1e-6) -> Tensor:
    if lam < 0:
        raise ContractError(f"loss weight must be nonnegative, got {lam}")
    return l_count + l_rank * lam
