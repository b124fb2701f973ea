"""Prompted class names to unit-norm semantic embeddings.

The text tower is a small causal transformer with frozen, seeded weights
(it stands in for a pretrained language tower).  Only the shared projection
into visual-token space, :class:`SemanticProjector`, is trained.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, TransformerBlock, component_rng
from .tensor import ContractError, Tensor

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
PROMPT_MODES = ("singular", "plural")

_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class PromptTemplateSet:
    mode: str
    templates: tuple[str, ...]

    def __post_init__(self) -> None:
        for t in self.templates:
            if t.count("{}") != 1:
                raise ContractError(f"template must contain exactly one '{{}}' placeholder: {t!r}")

    def fill(self, class_name: str) -> list[str]:
        return [t.format(class_name) for t in self.templates]


@lru_cache(maxsize=None)
def load_templates(mode: str) -> PromptTemplateSet:
    if mode not in PROMPT_MODES:
        raise ContractError(f"prompt_mode must be one of {PROMPT_MODES}, got {mode!r}")
    text = resources.files("zscount").joinpath("templates", f"{mode}.txt").read_text(encoding="utf-8")
    return PromptTemplateSet(mode, tuple(line for line in text.splitlines() if line.strip()))


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Dense 0-based ids: four specials, then sorted words."""

    def __init__(self, extra_words: Iterable[str] = ()):
        base: set[str] = set()
        for mode in PROMPT_MODES:
            for t in load_templates(mode).templates:
                base.update(words(t.replace("{}", " ")))
        from .data import ALL_CLASSES

        for name in ALL_CLASSES:
            base.update(words(name))
        base.update(w for e in extra_words for w in words(e))
        self.itos = [PAD, START, END, UNK, *sorted(base)]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def start_id(self) -> int:
        return self.stoi[START]

    @property
    def end_id(self) -> int:
        return self.stoi[END]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def tokenize(self, text: str, max_len: int) -> list[int]:
        """Lowercased word ids framed by start/end and padded to ``max_len``.

        Truncation drops trailing words but always keeps both frame tokens.
        """
        if max_len < 3:
            raise ContractError(f"max_len must be at least 3, got {max_len}")
        toks = words(text)
        if not toks:
            raise ContractError("cannot tokenize empty text")
        ids = [self.stoi.get(w, self.unk_id) for w in toks][: max_len - 2]
        ids = [self.start_id, *ids, self.end_id]
        return ids + [self.pad_id] * (max_len - len(ids))


@dataclass
class SemanticEmbedding:
    class_name: str
    raw: np.ndarray  # unit-norm, d_text
    projected: Tensor | None = None  # d_vis, output of the shared projection


class TextEncoder(Module):
    def __init__(self, d_text: int = 64, layers: int = 2, heads: int = 4, max_len: int = 16, seed: int = 0):
        rng = component_rng(seed, "text_encoder")
        self.vocab = Vocabulary()
        self._max_len = max_len
        self.token_embedding = T.parameter(rng.standard_normal((len(self.vocab), d_text)))
        self.position_embedding = T.parameter(0.1 * rng.standard_normal((max_len, d_text)))
        self.blocks = [TransformerBlock(d_text, heads, rng) for _ in range(layers)]
        self.ln_final = LayerNorm(d_text)
        self.proj = Linear(d_text, d_text, rng, bias=False)
        self._causal = np.triu(np.full((max_len, max_len), -1e9), k=1)
        self.freeze()
        self._cache: dict[str, np.ndarray] = {}

    @property
    def max_len(self) -> int:
        return self._max_len

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        ids = np.array([self.vocab.tokenize(t, self._max_len) for t in texts])
        with T.no_grad():
            x = T.Tensor(self.token_embedding.data[ids]) + self.position_embedding
            for block in self.blocks:
                x = block(x, self._causal)
            x = self.ln_final(x)
            end_pos = (ids == self.vocab.end_id).argmax(axis=1)
            feats = x.data[np.arange(len(texts)), end_pos]
            out = feats @ self.proj.weight.data
        return out / np.linalg.norm(out, axis=1, keepdims=True)

    def encode_text(self, text: str) -> np.ndarray:
        """End-token feature of one filled prompt, L2-normalised."""
        if text not in self._cache:
            self._cache[text] = self.encode_batch([text])[0]
        return self._cache[text].copy()

    def encode_templates(self, class_name: str, templates: PromptTemplateSet) -> np.ndarray:
        if not class_name.strip():
            raise ContractError("class name must be non-empty")
        if not templates.templates:
            raise ContractError("template set is empty")
        filled = templates.fill(class_name)
        missing = [t for t in filled if t not in self._cache]
        if missing:
            for t, v in zip(missing, self.encode_batch(missing)):
                self._cache[t] = v
        mean = np.mean([self._cache[t] for t in sorted(filled)], axis=0)
        return mean / np.linalg.norm(mean)


class SemanticProjector(Module):
    """The single linear map shared by every encoder layer's prompt conditioning."""

    def __init__(self, d_text: int, d_vis: int, seed: int, scale: float = 0.05):
        rng = component_rng(seed, "semantic_projector")
        self.weight = T.parameter(rng.uniform(-scale, scale, size=(d_text, d_vis)))
        self.bias = T.parameter(rng.uniform(-scale, scale, size=d_vis))

    def __call__(self, semantic: Tensor) -> Tensor:
        if semantic.shape[-1] != self.weight.shape[0]:
            raise T.ShapeError(f"projector expects width {self.weight.shape[0]}, got {semantic.shape}")
        return semantic @ self.weight + self.bias if semantic.ndim == 2 else (
            semantic.reshape(1, -1) @ self.weight + self.bias
        ).reshape(-1)


def encode_class(
    encoder: TextEncoder,
    class_name: str,
    templates: PromptTemplateSet,
    projector: SemanticProjector | None = None,
) -> SemanticEmbedding:
    raw = encoder.encode_templates(class_name, templates)
    projected = projector(T.tensor(raw)) if projector is not None else None
    return SemanticEmbedding(class_name=class_name, raw=raw, projected=projected)


def project_semantic(projector: SemanticProjector, semantic: np.ndarray | Tensor) -> Tensor:
    s = semantic if isinstance(semantic, Tensor) else T.tensor(semantic)
    return projector(s)
