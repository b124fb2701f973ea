"""Convolutional density decoder with map-gated encoder skip connections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, component_rng
from .tensor import ShapeError, Tensor


class DecoderConsistencyError(ShapeError):
    """Skip features, counting map, and decoder resolution do not line up."""


def tokens_to_grid(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    b, n, d = tokens.shape
    if n != grid[0] * grid[1]:
        raise DecoderConsistencyError(f"{n} tokens cannot fill a {grid[0]}x{grid[1]} grid")
    return tokens.reshape(b, grid[0], grid[1], d).transpose(0, 3, 1, 2)


def upsample_to(x: Tensor, size: int) -> Tensor:
    """Nearest-neighbour upsample by repeated doubling until the last axes reach ``size``."""
    h = x.shape[-1]
    while h < size:
        x = T.upsample2x_nearest(x)
        h *= 2
    if h != size:
        raise DecoderConsistencyError(f"cannot reach resolution {size} from {x.shape[-1]} by doubling")
    return x


class FeatureProjection(Module):
    """Grid-reshape patch tokens, then a bias-free 1×1 conv and GELU."""

    def __init__(self, d_in: int, c_out: int, rng: np.random.Generator):
        self.weight = T.parameter(rng.standard_normal((c_out, d_in, 1, 1)) / np.sqrt(d_in))

    def __call__(self, tokens: Tensor, grid: tuple[int, int]) -> Tensor:
        return T.gelu(T.conv2d(tokens_to_grid(tokens, grid), self.weight))


class DecoderUnit(Module):
    def __init__(self, c_in: int, c_out: int, upsample: int, rng: np.random.Generator):
        if upsample not in (1, 2):
            raise ValueError(f"upsample factor must be 1 or 2, got {upsample}")
        self.proj = Conv2d(c_in, c_out, 1, rng)
        self.conv = Conv2d(c_out, c_out, 3, rng)
        self._upsample = upsample

    @property
    def upsample(self) -> int:
        return self._upsample

    def __call__(self, x: Tensor) -> Tensor:
        x = T.gelu(self.conv(T.gelu(self.proj(x))))
        return T.upsample2x_nearest(x) if self._upsample == 2 else x


@dataclass
class DensityMap:
    density: Tensor  # B×1×H×W

    @property
    def counts(self) -> Tensor:
        return self.density.sum(axis=(1, 2, 3))

    @property
    def predicted_count(self) -> float:
        return float(self.density.data.sum())


class Decoder(Module):
    """Four units over ``[V, counting map]`` with optional skip injections.

    ``tap_map`` sends encoder layer ``l`` to decoder unit ``k`` (both
    1-based).  Before unit ``k`` runs, the projected layer-``l`` tokens,
    multiplied per channel by the counting map, are added to its input.
    Both the skip features and the map are nearest-upsampled to that
    unit's input resolution.
    """

    def __init__(
        self,
        d_vis: int,
        grid: tuple[int, int],
        c_dec: int = 32,
        upsample: tuple[int, ...] = (2, 2, 2, 1),
        tap_map: dict[int, int] | None = None,
        seed: int = 0,
        head_bias: float = -4.0,
        d_tap: int | None = None,
    ):
        tap_map = dict(tap_map or {})
        if len(set(tap_map.values())) != len(tap_map):
            raise ValueError(f"tap_map must be injective, got {tap_map}")
        n_units = len(upsample)
        for unit in tap_map.values():
            if not 1 <= unit <= n_units:
                raise ValueError(f"tap target unit {unit} outside 1..{n_units}")
        rng = component_rng(seed, "decoder")
        self._grid = grid
        self._tap_map = tap_map
        c_in = [d_vis + 1] + [c_dec] * (n_units - 1)
        self.units = [DecoderUnit(c_in[i], c_dec, f, rng) for i, f in enumerate(upsample)]
        self.head = Conv2d(c_dec, 1, 1, rng, gain=1.0)
        self.head.bias = T.parameter(np.full(1, head_bias))
        self.skips = {
            str(unit): FeatureProjection(d_tap or d_vis, c_in[unit - 1], component_rng(seed, f"skip.{unit}"))
            for unit in sorted(tap_map.values())
        }
        res = [grid[0]]
        for f in upsample:
            res.append(res[-1] * f)
        self._in_res = res[:-1]
        self._out_res = res[-1]

    @property
    def tap_map(self) -> dict[int, int]:
        return dict(self._tap_map)

    @property
    def output_resolution(self) -> int:
        return self._out_res

    def __call__(self, patches: Tensor, counting_map: Tensor, taps: dict[int, Tensor] | None = None,
                 skip_filter: Tensor | None = None) -> DensityMap:
        """``skip_filter`` overrides the map used to gate skips (default: ``counting_map``)."""
        taps = taps or {}
        b = patches.shape[0]
        gh, gw = self._grid
        if counting_map.shape != (b, gh, gw):
            raise DecoderConsistencyError(f"counting map {counting_map.shape} does not match grid {(b, gh, gw)}")
        gate = counting_map if skip_filter is None else skip_filter
        by_unit = {unit: layer for layer, unit in self._tap_map.items()}
        x = T.concat([tokens_to_grid(patches, self._grid), counting_map.reshape(b, 1, gh, gw)], axis=1)
        for k, unit in enumerate(self.units, start=1):
            if k in by_unit:
                layer = by_unit[k]
                if layer not in taps:
                    raise DecoderConsistencyError(f"decoder unit {k} expects encoder layer {layer}, which was not tapped")
                res = self._in_res[k - 1]
                feat = upsample_to(self.skips[str(k)](taps[layer], self._grid), res)
                g = upsample_to(gate.reshape(b, 1, gh, gw), res).broadcast_to(feat.shape)
                if feat.shape != x.shape:
                    raise DecoderConsistencyError(f"skip {feat.shape} does not match unit {k} input {x.shape}")
                x = x + feat * g
            x = unit(x)
        return DensityMap(T.softplus(self.head(x)))


def count(density: DensityMap | Tensor | np.ndarray) -> float:
    if isinstance(density, DensityMap):
        return density.predicted_count
    arr = density.data if isinstance(density, Tensor) else np.asarray(density)
    return float(arr.sum())
