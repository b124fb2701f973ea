"""Registry of gradient checks run by ``zscount gradcheck``.

Each check builds small random inputs from a seed and compares autodiff
against central differences.  Per-op checks reduce the op output to a
scalar through a fixed random weighting so every output element carries a
distinct cotangent.  End-to-end checks run a tiny model and probe all of
its trainable parameters with random directional derivatives.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .decoder import Decoder
from .gradcheck import GradCheckReport, grad_check
from .losses import build_rank_sets, counting_loss, normalize_gt, rank_contrastive_loss, total_loss
from .nn import Linear, MultiHeadAttention, TransformerBlock
from .similarity import affine_counting_map, similarity_map
from .tensor import Tensor
from .text import SemanticProjector
from .vision import ImageEncoder, PromptBank

CheckFn = Callable[[np.random.Generator], GradCheckReport]


@dataclass(frozen=True)
class Check:
    name: str
    module: str
    fn: CheckFn


REGISTRY: list[Check] = []


def register(name: str, module: str) -> Callable[[CheckFn], CheckFn]:
    def wrap(fn: CheckFn) -> CheckFn:
        REGISTRY.append(Check(name, module, fn))
        return fn

    return wrap


def modules() -> list[str]:
    return sorted({c.module for c in REGISTRY})


def _p(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return T.parameter(scale * rng.standard_normal(shape))


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = T.tensor(rng.standard_normal(out.shape))
    return lambda y: (y * w).sum()


def _op_check(name: str, rng: np.random.Generator, op: Callable[..., Tensor], *inputs: Tensor, **kw) -> GradCheckReport:
    reduce = _weighted(op(*inputs), rng)
    return grad_check(lambda *xs: reduce(op(*xs)), list(inputs), name=name, rng=rng, **kw)


# ---------------------------------------------------------------------------
# tensor ops
# ---------------------------------------------------------------------------


@register("add", "tensor")
def _add(rng):
    return _op_check("add", rng, lambda a, b, c: a + b + c, _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 4))


@register("sub", "tensor")
def _sub(rng):
    return _op_check("sub", rng, lambda a, b, c: a - b - c, _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 4))


@register("mul", "tensor")
def _mul(rng):
    return _op_check("mul", rng, lambda a, b: a * b, _p(rng, 3, 4), _p(rng, 3, 4))


@register("div", "tensor")
def _div(rng):
    den = T.parameter(rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
    return _op_check("div", rng, lambda a, b: a / b, _p(rng, 3, 4), den)


@register("scalar_ops", "tensor")
def _scalar(rng):
    c = float(rng.uniform(-2, 2))
    return _op_check("scalar_ops", rng, lambda a: -(a * c) + c, _p(rng, 5))


@register("pow", "tensor")
def _pow(rng):
    x = T.parameter(rng.uniform(0.5, 2.0, 6))
    e = float(rng.uniform(-2, 3))
    return _op_check("pow", rng, lambda a: a ** e, x)


@register("exp", "tensor")
def _exp(rng):
    return _op_check("exp", rng, lambda a: a.exp(), _p(rng, 6))


@register("log", "tensor")
def _log(rng):
    return _op_check("log", rng, lambda a: a.log(), T.parameter(rng.uniform(0.5, 3.0, 6)))


@register("sqrt", "tensor")
def _sqrt(rng):
    return _op_check("sqrt", rng, lambda a: a.sqrt(), T.parameter(rng.uniform(0.5, 3.0, 6)))


@register("gelu", "tensor")
def _gelu(rng):
    return _op_check("gelu", rng, T.gelu, _p(rng, 8, scale=2.0))


@register("softplus", "tensor")
def _softplus(rng):
    return _op_check("softplus", rng, T.softplus, _p(rng, 8, scale=3.0))


@register("sum_mean", "tensor")
def _sum(rng):
    return _op_check("sum_mean", rng, lambda a: a.sum(axis=1) * a.mean(axis=(1, 2)).reshape(2, 1).broadcast_to((2, 4)), _p(rng, 2, 3, 4))


@register("reshape_transpose", "tensor")
def _reshape(rng):
    return _op_check("reshape_transpose", rng, lambda a: a.reshape(4, 6).transpose(1, 0).swapaxes(0, 1), _p(rng, 2, 3, 4))


@register("broadcast_to", "tensor")
def _broadcast(rng):
    return _op_check("broadcast_to", rng, lambda a: a.broadcast_to((3, 2, 4)), _p(rng, 2, 4))


@register("getitem", "tensor")
def _getitem(rng):
    idx = rng.integers(0, 4, size=5)
    return _op_check("getitem", rng, lambda a: T.concat([a[:, 1:3].reshape(-1), a[idx].reshape(-1)]), _p(rng, 4, 3))


@register("concat", "tensor")
def _concat(rng):
    return _op_check("concat", rng, lambda a, b: T.concat([a, b], axis=1), _p(rng, 2, 3), _p(rng, 2, 2))


@register("matmul", "tensor")
def _matmul(rng):
    return _op_check("matmul", rng, lambda a, b, c: (a @ b) @ c, _p(rng, 2, 3, 4), _p(rng, 2, 4, 3), _p(rng, 3, 2))


@register("softmax", "tensor")
def _softmax(rng):
    axis = int(rng.integers(0, 2))
    return _op_check("softmax", rng, lambda a: T.softmax(a, axis=axis), _p(rng, 3, 5, scale=2.0))


@register("layer_norm", "tensor")
def _layer_norm(rng):
    return _op_check("layer_norm", rng, T.layer_norm, _p(rng, 3, 6), _p(rng, 6), _p(rng, 6))


@register("conv2d", "tensor")
def _conv2d(rng):
    k = int(rng.choice([1, 3]))
    return _op_check("conv2d", rng, T.conv2d, _p(rng, 2, 2, 4, 4), _p(rng, 3, 2, k, k), _p(rng, 3))


@register("upsample2x", "tensor")
def _upsample(rng):
    return _op_check("upsample2x", rng, T.upsample2x_nearest, _p(rng, 1, 2, 3, 3))


@register("cosine_rows", "tensor")
def _cosine(rng):
    return _op_check("cosine_rows", rng, T.cosine_rows, _p(rng, 2, 5, 4), _p(rng, 2, 4))


@register("masked_logsumexp", "tensor")
def _mlse(rng):
    mask = rng.random((3, 6)) < 0.5
    mask[np.arange(3), rng.integers(0, 6, 3)] = True
    return _op_check("masked_logsumexp", rng, lambda a: T.masked_logsumexp(a, mask), _p(rng, 3, 6, scale=2.0))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _module_check(name: str, rng: np.random.Generator, module, x: Tensor, call=None, **kw) -> GradCheckReport:
    call = call or (lambda m, inp: m(inp))
    params = module.parameters()
    reduce = _weighted(call(module, x), rng)
    return grad_check(lambda *_: reduce(call(module, x)), [x, *params], name=name, rng=rng,
                      max_coords=kw.pop("max_coords", 6), **kw)


@register("linear", "nn")
def _linear(rng):
    return _module_check("linear", rng, Linear(4, 3, rng), _p(rng, 2, 4))


@register("attention", "nn")
def _attention(rng):
    mask = np.triu(np.full((4, 4), -1e9), k=1)
    return _module_check("attention", rng, MultiHeadAttention(8, 2, rng), _p(rng, 2, 4, 8),
                         call=lambda m, x: m(x, mask))


@register("transformer_block", "nn")
def _block(rng):
    return _module_check("transformer_block", rng, TransformerBlock(8, 2, rng), _p(rng, 2, 3, 8))


@register("semantic_projector", "text")
def _projector(rng):
    return _module_check("semantic_projector", rng, SemanticProjector(6, 4, int(rng.integers(1 << 30))), _p(rng, 2, 6))


@register("prompted_encoder", "vision")
def _encoder(rng):
    enc = ImageEncoder(image_size=8, patch=4, d=8, layers=2, heads=2, seed=int(rng.integers(1 << 30)))
    bank = PromptBank(2, 8, [1, 2], int(rng.integers(1 << 30)), init=0.5)
    images = rng.random((2, 3, 8, 8))
    sem = _p(rng, 2, 8, scale=0.3)

    def run(_m, s):
        out = enc(images, bank, s, taps=(1,))
        return T.concat([out.patches.reshape(-1), out.taps[1].reshape(-1)])

    reduce = _weighted(run(None, sem), rng)
    params = [sem, *bank.parameters(), *enc.parameters()]
    return grad_check(lambda *_: reduce(run(None, sem)), params, name="prompted_encoder", rng=rng, max_coords=3,
                      probe_inputs=6, n_directions=2)


@register("similarity_map", "similarity")
def _sim(rng):
    return _op_check("similarity_map", rng, lambda v, t: similarity_map(v, t, (2, 3)), _p(rng, 2, 6, 4), _p(rng, 2, 4))


@register("affine_map", "similarity")
def _affine(rng):
    return _op_check("affine_map", rng, affine_counting_map, _p(rng, 2, 3, 3), _p(rng, 3, 3), _p(rng, 3, 3))


@register("decoder", "decoder")
def _decoder(rng):
    dec = Decoder(4, (2, 2), c_dec=3, upsample=(2, 1), tap_map={1: 2}, seed=int(rng.integers(1 << 30)), d_tap=5)
    patches, cmap, tap = _p(rng, 2, 4, 4), _p(rng, 2, 2, 2), _p(rng, 2, 4, 5)

    def f(*_):
        return dec(patches, cmap, {1: tap}).counts.sum()

    return grad_check(f, [patches, cmap, tap, *dec.parameters()], name="decoder", rng=rng, max_coords=4)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@register("counting_loss", "losses")
def _count_loss(rng):
    target = rng.random((2, 1, 4, 4))
    return grad_check(lambda p: counting_loss(p, target), [_p(rng, 2, 1, 4, 4)], name="counting_loss", rng=rng)


@register("rank_loss", "losses")
def _rank_loss(rng):
    sets = build_rank_sets(rng.random((2, 4, 4)), (0.8, 0.6, 0.4))
    tau = float(rng.uniform(0.5, 2.0))
    return grad_check(lambda s: rank_contrastive_loss(s, sets, tau), [_p(rng, 2, 4, 4)], name="rank_loss", rng=rng)


@register("total_loss", "losses")
def _total(rng):
    lam = float(rng.uniform(0, 1))
    return grad_check(lambda a, b: total_loss(a.sum(), (b * b).sum(), lam), [_p(rng, 3), _p(rng, 2)],
                      name="total_loss", rng=rng)


# ---------------------------------------------------------------------------
# end-to-end paths through a tiny model
# ---------------------------------------------------------------------------

TINY_MODEL = ModelConfig(image_size=16, patch_size=4, d_vis=8, vis_layers=3, vis_heads=2, d_text=8, text_layers=1,
                         text_heads=2, max_len=12, c_dec=4, upsample=[2, 2], head_bias=-1.0)


def tiny_config(seed: int, **changes) -> TrainConfig:
    base = dict(num_prompts=2, spt_layers=[1, 3], tap_map={"1": 1, "2": 2}, seed=seed, lambda_rank=0.5,
                model=TINY_MODEL.__dict__ | {"upsample": list(TINY_MODEL.upsample)})
    return TrainConfig.from_dict({**base, **changes})


def _e2e(name: str, rng: np.random.Generator, loss: Callable) -> GradCheckReport:
    from .data import ALL_CLASSES, gaussian_density
    from .model import ZeroShotCounter

    cfg = tiny_config(int(rng.integers(1 << 30)))
    model = ZeroShotCounter(cfg)
    # Move LAT away from the identity so its gradient path is exercised generically.
    model.lat.weight.data += 0.3 * rng.standard_normal(model.lat.weight.shape)
    model.lat.bias.data += 0.3 * rng.standard_normal(model.lat.bias.shape)
    names = list(rng.choice(sorted(ALL_CLASSES), 2))
    images = rng.random((2, 3, 16, 16))
    density = np.stack([gaussian_density(rng.uniform(2, 14, (int(rng.integers(1, 4)), 2)), 1.5, 16, 16)
                        for _ in names])
    params = model.parameters()

    def f(*_):
        return loss(model, model(images, names), density)

    return grad_check(f, params, name=name, rng=rng, max_coords=2, probe_inputs=4, n_directions=2)


@register("count_decode", "model")
def _e2e_count(rng):
    return _e2e("count_decode", rng, lambda m, out, d: out.density.counts.sum())


@register("counting_loss_e2e", "model")
def _e2e_lcount(rng):
    return _e2e("counting_loss_e2e", rng, lambda m, out, d: counting_loss(out.density.density, d))


@register("rank_loss_e2e", "model")
def _e2e_lrank(rng):
    def loss(m, out, d):
        return rank_contrastive_loss(out.counting_map, build_rank_sets(normalize_gt(d, 4), m.config.thresholds))

    return _e2e("rank_loss_e2e", rng, loss)


@register("total_loss_e2e", "model")
def _e2e_total(rng):
    from .train import compute_losses

    return _e2e("total_loss_e2e", rng, lambda m, out, d: compute_losses(m, out, d).total)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    reports: list[GradCheckReport]
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failures(self) -> list[GradCheckReport]:
        return [r for r in self.reports if not r.passed]


def select(module: str = "all") -> list[Check]:
    if module == "all":
        return list(REGISTRY)
    chosen = [c for c in REGISTRY if c.module == module or c.name == module]
    if not chosen:
        raise KeyError(module)
    return chosen


def run_suite(module: str = "all", seeds: int = 100, base_seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    """Run every selected check once per seed; one aggregated report per check."""
    start = time.perf_counter()
    reports = []
    for check in select(module):
        worst, n = 0.0, 0
        for s in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([base_seed, s]))
            rep = check.fn(rng)
            worst = max(worst, rep.max_rel_error) if np.isfinite(rep.max_rel_error) else float("inf")
            n += rep.n_checked
        reports.append(GradCheckReport(f"{check.module}.{check.name}", worst, n, tol))
    return SuiteResult(reports, seeds, time.perf_counter() - start)


@contextlib.contextmanager
def corrupted(op: type[T.Function], factor: float = 1.01) -> Iterator[None]:
    """Temporarily scale an op's backward rule (test fixture for harness failures)."""
    original = op.backward

    def bad(self, grad):
        return tuple(None if g is None else g * factor for g in original(self, grad))

    op.backward = bad
    try:
        yield
    finally:
        op.backward = original
