"""Patch-token image encoder with per-layer semantic-conditioned prompts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, TransformerBlock, component_rng
from .tensor import ShapeError, Tensor


def patchify_pixels(images: np.ndarray | Tensor, patch: int) -> Tensor:
    """``B×3×H×W`` (or ``3×H×W``) to ``B×N×(3·P·P)`` row-major patches."""
    x = images if isinstance(images, Tensor) else T.tensor(images)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


class PromptBank(Module):
    """Learnable prompt tokens, ``M`` per active encoder layer (1-based indices)."""

    def __init__(self, num_prompts: int, d: int, active_layers: list[int], seed: int, init: float = 0.05):
        self._m = num_prompts
        self._active = sorted(set(active_layers)) if num_prompts > 0 else []
        self.tokens = {}
        for layer in self._active:
            rng = component_rng(seed, f"prompts.{layer}")
            self.tokens[str(layer)] = T.parameter(rng.uniform(-init, init, size=(num_prompts, d)))

    @property
    def num_prompts(self) -> int:
        return self._m

    @property
    def active_layers(self) -> list[int]:
        return list(self._active)

    def get(self, layer: int) -> Tensor | None:
        return self.tokens.get(str(layer))


def build_prompts(prompts: Tensor, semantic: Tensor | None) -> Tensor:
    """Add the projected semantic vector to every prompt token.

    ``prompts`` is ``M×d``; ``semantic`` is ``B×d`` (one per image).  The
    result is ``B×M×d``; with ``semantic=None`` the prompts come back as-is.
    """
    if semantic is None:
        return prompts
    if semantic.ndim == 1:
        semantic = semantic.reshape(1, -1)
    b, d = semantic.shape
    m, dp = prompts.shape
    if d != dp:
        raise ShapeError(f"prompt width {dp} does not match semantic width {d}")
    return prompts.broadcast_to((b, m, d)) + semantic.reshape(b, 1, d).broadcast_to((b, m, d))


@dataclass
class EncoderOutput:
    patches: Tensor  # B×N×d, final layer, after the output norm
    cls: Tensor  # B×d
    taps: dict[int, Tensor]  # layer index -> B×N×d post-layer patch tokens
    grid: tuple[int, int]
    lengths: list[int]  # tokens emitted by each layer


class ImageEncoder(Module):
    def __init__(self, image_size: int = 64, patch: int = 8, d: int = 64, layers: int = 6, heads: int = 4, seed: int = 0):
        if image_size % patch:
            raise ShapeError(f"image size {image_size} is not divisible by patch size {patch}")
        rng = component_rng(seed, "image_encoder")
        self._patch = patch
        self._grid = (image_size // patch, image_size // patch)
        n = self._grid[0] * self._grid[1]
        self.patch_embed = Linear(3 * patch * patch, d, rng)
        self.position_embedding = T.parameter(0.02 * rng.standard_normal((n, d)))
        self.cls_token = T.parameter(0.02 * rng.standard_normal(d))
        self.blocks = [TransformerBlock(d, heads, rng) for _ in range(layers)]
        self.ln_post = LayerNorm(d)

    @property
    def grid(self) -> tuple[int, int]:
        return self._grid

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def patchify(self, images: np.ndarray | Tensor) -> Tensor:
        """Embedded patch sequence ``B×N×d`` with position embeddings added."""
        x = patchify_pixels(images, self._patch)
        if x.shape[1] != self.position_embedding.shape[0]:
            raise ShapeError(f"got {x.shape[1]} patches, encoder expects {self.position_embedding.shape[0]}")
        return self.patch_embed(x) + self.position_embedding

    def __call__(
        self,
        images: np.ndarray | Tensor,
        prompts: PromptBank | None = None,
        semantic: Tensor | None = None,
        taps: tuple[int, ...] = (),
    ) -> EncoderOutput:
        """Run the encoder.

        For each layer with prompts, the conditioned tokens are inserted
        between the class token and the patches, and their outputs are
        dropped before the next layer, so every layer emits ``1 + N`` tokens.
        """
        for t in taps:
            if not 1 <= t <= len(self.blocks):
                raise ShapeError(f"tap layer {t} outside 1..{len(self.blocks)}")
        v = self.patchify(images)
        b, n, d = v.shape
        x = T.concat([self.cls_token.broadcast_to((b, 1, d)), v], axis=1)
        snapshots: dict[int, Tensor] = {}
        lengths: list[int] = []
        for idx, block in enumerate(self.blocks, start=1):
            p = prompts.get(idx) if prompts is not None else None
            if p is not None and p.shape[0] > 0:
                if semantic is not None:
                    cond = build_prompts(p, semantic)
                else:
                    cond = p.broadcast_to((b, *p.shape))
                m = p.shape[0]
                y = block(T.concat([x[:, :1], cond, x[:, 1:]], axis=1))
                x = T.concat([y[:, :1], y[:, 1 + m:]], axis=1)
            else:
                x = block(x)
            lengths.append(x.shape[1])
            if x.shape[1] != 1 + n:
                raise ShapeError(f"layer {idx} emitted {x.shape[1]} tokens, expected {1 + n}")
            if idx in taps:
                snapshots[idx] = x[:, 1:]
        x = self.ln_post(x)
        return EncoderOutput(patches=x[:, 1:], cls=x[:, 0], taps=snapshots, grid=self._grid, lengths=lengths)
