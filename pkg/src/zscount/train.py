"""Training loop, count metrics, ablation runs, and cross-family evaluation."""

from __future__ import annotations

import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import tensor as T
from .checkpoint import load_state, save_checkpoint
from .config import TrainConfig
from .data import Sample, hflip_augment
from .losses import LossBundle, build_rank_sets, counting_loss, normalize_gt, rank_contrastive_loss, total_loss
from .model import ZeroShotCounter
from .optim import OptimizerState, adamw_step
from .similarity import lat_stats

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def snap_to_float32(model: ZeroShotCounter) -> None:
    """Round parameters onto the float32 grid the checkpoint format stores."""
    for p in model.parameters():
        p.data[...] = p.data.astype(np.float32)


def build_model(config: TrainConfig) -> ZeroShotCounter:
    model = ZeroShotCounter(config)
    snap_to_float32(model)
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mae: float
    rmse: float
    n_samples: int
    per_class: dict[str, dict[str, float]]
    wall_clock: float
    predictions: list[float] = field(default_factory=list)
    targets: list[int] = field(default_factory=list)

    def to_json(self, with_predictions: bool = False) -> dict:
        out = {"mae": self.mae, "rmse": self.rmse, "n_samples": self.n_samples,
               "per_class": self.per_class, "wall_clock": self.wall_clock}
        if with_predictions:
            out["predictions"] = self.predictions
            out["targets"] = self.targets
        return out


def count_metrics(predictions: Sequence[float], targets: Sequence[float]) -> tuple[float, float]:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0:
        raise ValueError("cannot score an empty set of predictions")
    err = p - t
    return float(np.abs(err).mean()), float(np.sqrt((err * err).mean()))


def evaluate(model: ZeroShotCounter, samples: Sequence[Sample], batch_size: int = 16) -> EvalReport:
    """MAE / RMSE of summed density against true counts, in sample order."""
    if len(samples) == 0:
        raise ValueError("evaluate needs a non-empty dataset")
    start = time.perf_counter()
    images = np.stack([s.image for s in samples])
    names = [s.class_name for s in samples]
    preds = model.predict_counts(images, names, batch_size)
    gts = [s.count for s in samples]
    mae, rmse = count_metrics(preds, gts)
    per_class: dict[str, dict[str, float]] = {}
    for name in sorted(set(names)):
        idx = [i for i, n in enumerate(names) if n == name]
        cm, cr = count_metrics(preds[idx], [gts[i] for i in idx])
        per_class[name] = {"mae": cm, "rmse": cr, "n": len(idx)}
    return EvalReport(mae, rmse, len(samples), per_class, time.perf_counter() - start,
                      [float(x) for x in preds], gts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ZeroShotCounter
    curve: list[dict]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    checkpoint: Path | None = None

    def restore_best(self) -> ZeroShotCounter:
        load_state(self.model, self.best_state)
        return self.model


def compute_losses(model: ZeroShotCounter, out, density: np.ndarray) -> LossBundle:
    cfg = model.config
    l_count = counting_loss(out.density.density, density)
    if cfg.use_lat and cfg.lambda_rank > 0:
        sets = build_rank_sets(normalize_gt(density, cfg.model.patch_size), cfg.thresholds)
        l_rank = rank_contrastive_loss(out.counting_map, sets, cfg.tau)
    else:
        l_rank = T.tensor(0.0)
    return LossBundle(l_count, l_rank, total_loss(l_count, l_rank, cfg.lambda_rank), cfg.lambda_rank)


def _grad_norms(model: ZeroShotCounter) -> dict[str, float]:
    return {n: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0 for n, p in model.named_parameters()}


def train(
    config: TrainConfig,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample] | None = None,
    model: ZeroShotCounter | None = None,
    *,
    allowed_classes: Iterable[str] | None = None,
    out_dir: str | Path | None = None,
    stream: TextIO | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimise the total loss with AdamW; deterministic given ``config.seed``.

    Every batch is checked against ``allowed_classes`` (the seen classes)
    when given.  One JSON metrics line per epoch goes to ``stream``.  The
    best validation-MAE state is kept (the initial state when ``epochs=0``
    or no validation set is given and training never runs).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    model = model if model is not None else build_model(config)
    allowed = set(allowed_classes) if allowed_classes is not None else None
    params = model.parameters()
    state = OptimizerState(betas=tuple(config.betas), eps=config.eps)
    out_path = Path(out_dir) if out_dir is not None else None
    curve: list[dict] = []
    best_state = model.state_dict()
    best_mae, best_epoch = float("inf"), 0

    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([config.seed, 7, epoch])).permutation(len(train_set))
        sums = {"l_count": 0.0, "l_rank": 0.0, "l_total": 0.0}
        abs_err, n_seen, n_batches = 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [
                hflip_augment(train_set[i], config.hflip_p, np.random.SeedSequence([config.seed, 11, epoch, int(i)]))
                for i in idx
            ]
            names = [s.class_name for s in batch]
            if allowed is not None and not set(names) <= allowed:
                raise TrainingError(f"batch contains classes outside the training split: {sorted(set(names) - allowed)}",
                                    {"epoch": epoch, "classes": names})
            images = np.stack([s.image for s in batch])
            density = np.stack([s.density for s in batch])
            out = model(images, names)
            losses = compute_losses(model, out, density)
            model.zero_grad()
            T.backward(losses.total)
            values = {"l_count": losses.count.item(), "l_rank": losses.rank.item(), "l_total": losses.total.item()}
            norms = _grad_norms(model)
            if not all(np.isfinite(v) for v in values.values()) or not all(np.isfinite(v) for v in norms.values()):
                diag = {"epoch": epoch, "batch_start": start, "classes": names, "lr": config.lr,
                        "losses": values, "grad_norms": norms}
                if out_path is not None:
                    out_path.mkdir(parents=True, exist_ok=True)
                    (out_path / "nan_dump.json").write_text(json.dumps(diag, indent=2, default=str))
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}", diag)
            adamw_step(params, state, config.lr, config.weight_decay)
            snap_to_float32(model)
            for k in sums:
                sums[k] += values[k]
            abs_err += float(np.abs(out.counts - [s.count for s in batch]).sum())
            n_seen += len(batch)
            n_batches += 1
        record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "train_mae": abs_err / n_seen,
                  "val_mae": None}
        if val_set:
            record["val_mae"] = evaluate(model, val_set).mae
            if record["val_mae"] < best_mae:
                best_mae, best_epoch, best_state = record["val_mae"], epoch, model.state_dict()
        else:
            best_epoch, best_state = epoch, model.state_dict()
        curve.append(record)
        if stream is not None:
            stream.write(json.dumps(record) + "\n")
            stream.flush()
        if on_epoch is not None:
            on_epoch(record)

    ckpt = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        ckpt = out_path / "checkpoint.zsc"
        final = model.state_dict()
        load_state(model, best_state)
        save_checkpoint(model, ckpt)
        load_state(model, final)
    return TrainResult(model, curve, best_state, best_epoch, ckpt)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

_BASE_OFF = {"use_spt": False, "use_lat": False, "use_sasc": False}

ABLATION_ROWS: dict[str, list[tuple[str, dict]]] = {
    "m1": [("m1", dict(_BASE_OFF))],
    "m2": [("m2", {**_BASE_OFF, "use_spt": True})],
    "m3": [("m3", {**_BASE_OFF, "use_lat": True})],
    "m4": [("m4", {**_BASE_OFF, "use_sasc": True})],
    "m5": [("m5", {"use_spt": True, "use_lat": True, "use_sasc": True})],
    "table4-spt": [("table4-spt", {"use_spt": True, "use_lat": True, "use_sasc": True, "condition_spt_on_text": False})],
    "table4-sasc": [("table4-sasc", {"use_spt": True, "use_lat": True, "use_sasc": True, "filter_sasc_with_map": False})],
    "table5-singular": [("table5-singular", {"use_spt": True, "use_lat": True, "use_sasc": True, "prompt_mode": "singular"})],
    "sweep-tokens": [(f"tokens-{m}", {"num_prompts": m}) for m in (1, 5, 10, 20)],
    "sweep-depth": [],  # filled from the encoder depth at run time
    "sweep-taps": [],
}


def depth_rows(n_layers: int) -> list[tuple[str, dict]]:
    """Prompt placements mirroring first-quarter / first-half / last-quarter / last-half / all layers."""
    q = max(1, round(n_layers / 4))
    half = max(1, n_layers // 2)
    spans = [(1, q), (1, half), (n_layers - q + 1, n_layers), (half + 1, n_layers), (1, n_layers)]
    return [(f"depth-{a}-{b}", {"spt_layers": [a, b]}) for a, b in spans]


def tap_rows(n_layers: int) -> list[tuple[str, dict]]:
    """Three consecutive encoder layers feeding decoder units 2, 3, 4."""
    rows = []
    for first in range(1, n_layers - 1):
        layers = [first, first + 1, first + 2]
        rows.append((f"taps-{'-'.join(map(str, layers))}", {"tap_map": {str(l): k for l, k in zip(layers, (2, 3, 4))}}))
    return rows


def expand_matrix(names: Sequence[str], n_layers: int) -> list[tuple[str, dict]]:
    rows: list[tuple[str, dict]] = []
    for name in names:
        if name not in ABLATION_ROWS:
            raise KeyError(name)
        if name == "sweep-depth":
            rows += depth_rows(n_layers)
        elif name == "sweep-taps":
            rows += tap_rows(n_layers)
        else:
            rows += ABLATION_ROWS[name]
    return rows


@dataclass
class AblationRow:
    name: str
    flags: dict
    report: EvalReport
    lat: list | None
    result: TrainResult
    extra_reports: dict[str, EvalReport] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"row": self.name, "flags": self.flags, **self.report.to_json(), "best_epoch": self.result.best_epoch}
        if self.lat is not None:
            out["lat"] = [s.to_json() for s in self.lat]
        for key, rep in self.extra_reports.items():
            out[key] = rep.to_json()
        return out


def ablate(
    base_config: TrainConfig,
    matrix: Sequence[str],
    train_set: Sequence[Sample],
    val_set: Sequence[Sample] | None,
    eval_set: Sequence[Sample],
    *,
    allowed_classes: Iterable[str] | None = None,
    extra_eval: dict[str, Sequence[Sample]] | None = None,
    stream: TextIO | None = None,
) -> list[AblationRow]:
    """Train and evaluate one model per matrix row, all from the same seed.

    Rows are scored on ``eval_set`` with the best-validation weights;
    ``extra_eval`` sets (for example another family) are scored on the same
    weights without further training.
    """
    rows = []
    allowed = list(allowed_classes) if allowed_classes is not None else None
    for name, changes in expand_matrix(matrix, base_config.model.vis_layers):
        cfg = base_config.replace(**changes)
        log.info("ablation row %s", name)
        result = train(cfg, train_set, val_set, allowed_classes=allowed, stream=stream)
        model = result.restore_best()
        report = evaluate(model, eval_set)
        extras = {key: cross_family_eval(model, samples) for key, samples in (extra_eval or {}).items()}
        lat = lat_stats(model.lat.weight, model.lat.bias) if model.lat is not None else None
        flags = {k: getattr(cfg, k) for k in TrainConfig.FLAGS}
        flags.update({k: v for k, v in changes.items() if k not in flags})
        rows.append(AblationRow(name, flags, report, lat, result, extras))
    return rows


def cross_family_eval(model: ZeroShotCounter, samples: Sequence[Sample], train_family: str | None = None) -> EvalReport:
    """Score a frozen model on another data family; parameters must not change."""
    from .data import get_class

    families = {get_class(s.class_name).family for s in samples}
    if train_family is not None and train_family in families:
        warnings.warn(f"cross-family evaluation on the training family {train_family!r}", stacklevel=2)
    before = model.fingerprint()
    report = evaluate(model, samples)
    if model.fingerprint() != before:
        raise RuntimeError("model parameters changed during cross-family evaluation")
    return report


def format_table(rows: Sequence[AblationRow]) -> str:
    extra_keys = sorted({k for r in rows for k in r.extra_reports})
    header = ["row", "MAE", "RMSE", "n"] + [f"{k} MAE" for k in extra_keys]
    lines = [[r.name, f"{r.report.mae:.3f}", f"{r.report.rmse:.3f}", str(r.report.n_samples)]
             + [f"{r.extra_reports[k].mae:.3f}" if k in r.extra_reports else "-" for k in extra_keys] for r in rows]
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return "\n".join([fmt.format(*header)] + [fmt.format(*l) for l in lines])


def metrics_writer(stream: TextIO | None = sys.stdout) -> TextIO | None:
    return stream
