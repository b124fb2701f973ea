"""Assembly of text side, prompted image encoder, counting map, and decoder.

Flags on :class:`TrainConfig` select the ablation variant; with all of them
off the model is the plain baseline (cosine map concatenated to the patch
features and decoded without skips).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .decoder import Decoder, DensityMap
from .nn import Linear, Module, component_rng
from .similarity import AffineTransform, similarity_map
from .tensor import Tensor
from .text import SemanticProjector, TextEncoder, load_templates
from .vision import EncoderOutput, ImageEncoder, PromptBank


@lru_cache(maxsize=8)
def shared_text_encoder(d_text: int, layers: int, heads: int, max_len: int, seed: int) -> TextEncoder:
    return TextEncoder(d_text, layers, heads, max_len, seed)


@dataclass
class ForwardOutput:
    similarity: Tensor  # B×h×w
    counting_map: Tensor  # B×h×w
    density: DensityMap
    encoded: EncoderOutput
    semantic: np.ndarray  # B×d_text

    @property
    def counts(self) -> np.ndarray:
        return self.density.density.data.sum(axis=(1, 2, 3))


class ZeroShotCounter(Module):
    def __init__(self, config: TrainConfig):
        m = config.model
        seed = config.seed
        self._config = config
        self._text = shared_text_encoder(m.d_text, m.text_layers, m.text_heads, m.max_len, m.text_seed)
        self._templates = load_templates(config.prompt_mode)
        self.encoder = ImageEncoder(m.image_size, m.patch_size, m.d_vis, m.vis_layers, m.vis_heads, seed)
        self.visual_proj = Linear(m.d_vis, m.d_text, component_rng(seed, "visual_proj"), bias=False)
        self.prompts = None
        self.projector = None
        if config.use_spt:
            self.prompts = PromptBank(config.num_prompts, m.d_vis, config.prompt_layers, seed, m.prompt_init)
            if config.condition_spt_on_text:
                self.projector = SemanticProjector(m.d_text, m.d_vis, seed)
        self.lat = AffineTransform(self.encoder.grid) if config.use_lat else None
        self.decoder = Decoder(m.d_text, self.encoder.grid, m.c_dec, tuple(m.upsample), config.effective_taps,
                               seed, m.head_bias, d_tap=m.d_vis)

    @property
    def config(self) -> TrainConfig:
        return self._config

    @property
    def text_encoder(self) -> TextEncoder:
        return self._text

    def semantic(self, class_names: list[str]) -> np.ndarray:
        return np.stack([self._text.encode_templates(c, self._templates) for c in class_names])

    def __call__(self, images: np.ndarray, class_names: list[str]) -> ForwardOutput:
        cfg = self._config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if len(class_names) != images.shape[0]:
            raise ValueError(f"{len(class_names)} class names for {images.shape[0]} images")
        raw = self.semantic(list(class_names))
        sem = T.tensor(raw)
        projected = self.projector(sem) if self.projector is not None else None
        taps = tuple(sorted(cfg.effective_taps))
        enc = self.encoder(images, self.prompts, projected, taps)
        patches = self.visual_proj(enc.patches)
        sim = similarity_map(patches, sem, enc.grid)
        cmap = self.lat(sim) if self.lat is not None else sim
        gate = None
        if cfg.effective_taps and not cfg.filter_sasc_with_map:
            gate = T.tensor(np.ones(cmap.shape))
        density = self.decoder(patches, cmap, enc.taps, skip_filter=gate)
        return ForwardOutput(sim, cmap, density, enc, raw)

    def predict_counts(self, images: np.ndarray, class_names: list[str], batch_size: int = 16) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(class_names), batch_size):
                out.append(self(images[i:i + batch_size], class_names[i:i + batch_size]).counts)
        return np.concatenate(out) if out else np.zeros(0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()
