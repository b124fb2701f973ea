"""Patch-text cosine similarity and its learnable elementwise affine map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import ShapeError, Tensor

#: running count of patch/text pairs that hit the zero-norm guard
zero_norm_events = 0


def similarity_map(patches: Tensor, semantic: Tensor | np.ndarray, grid: tuple[int, int]) -> Tensor:
    """Cosine similarity of each patch embedding with the class embedding.

    ``patches`` is ``B×N×d`` (or ``N×d``) and ``semantic`` is ``B×d`` (or
    ``d``).  Returns the ``B×h×w`` grid, filled row-major.  Zero-norm
    vectors give 0 and bump :data:`zero_norm_events`.
    """
    global zero_norm_events
    sem = semantic if isinstance(semantic, Tensor) else T.tensor(semantic)
    single = patches.ndim == 2
    if single:
        patches = patches.reshape(1, *patches.shape)
        sem = sem.reshape(1, -1)
    b, n, _ = patches.shape
    if n != grid[0] * grid[1]:
        raise ShapeError(f"{n} patches cannot fill a {grid[0]}x{grid[1]} grid")
    zero_v = np.linalg.norm(patches.data, axis=-1) == 0
    zero_t = np.linalg.norm(sem.data, axis=-1) == 0
    zero_norm_events += int((zero_v | zero_t[:, None]).sum())
    s = T.cosine_rows(patches, sem).reshape(b, *grid)
    return s.reshape(*grid) if single else s


def affine_counting_map(sim: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Elementwise ``weight * sim + bias``; the parameters are shared over the batch."""
    if weight.shape != bias.shape or sim.shape[-2:] != weight.shape:
        raise ShapeError(f"counting map shapes disagree: S {sim.shape}, W {weight.shape}, B {bias.shape}")
    if sim.ndim == 2:
        return weight * sim + bias
    return weight.broadcast_to(sim.shape) * sim + bias


class AffineTransform(Module):
    """Learnable per-cell scale and offset, initialised to the identity map."""

    def __init__(self, grid: tuple[int, int]):
        self.weight = T.parameter(np.ones(grid))
        self.bias = T.parameter(np.zeros(grid))

    def __call__(self, sim: Tensor) -> Tensor:
        return affine_counting_map(sim, self.weight, self.bias)


@dataclass
class MatrixStats:
    matrix: str
    min: float
    max: float
    mean: float
    std: float
    bins: list[int]
    edges: list[float]

    def to_json(self) -> dict:
        return {"matrix": self.matrix, "min": self.min, "max": self.max, "mean": self.mean,
                "std": self.std, "bins": self.bins, "edges": self.edges}


def matrix_stats(name: str, values: np.ndarray, n_bins: int = 32) -> MatrixStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    # a point mass gets a unit-width window so the histogram stays well defined
    rng = (lo - 0.5, hi + 0.5) if lo == hi else (lo, hi)
    counts, edges = np.histogram(v, bins=n_bins, range=rng)
    return MatrixStats(name, lo, hi, float(v.mean()), float(v.std()), counts.tolist(), edges.tolist())


def lat_stats(weight: Tensor | np.ndarray, bias: Tensor | np.ndarray) -> list[MatrixStats]:
    w = weight.data if isinstance(weight, Tensor) else weight
    b = bias.data if isinstance(bias, Tensor) else bias
    return [matrix_stats("W", w), matrix_stats("B", b)]
