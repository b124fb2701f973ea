"""Seeded synthetic zero-shot counting benchmark.

Images are procedurally rendered from (seed, config) and never stored.  Two
layout families exist: ``discs-world`` scatters shape×colour instances at
random, ``cars-grid`` parks small rectangles in jittered grid slots.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import ContractError

FAMILIES = ("discs-world", "cars-grid")

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.85, 0.15),
}
DISC_SHAPES = ("disc", "square", "triangle", "cross")
DISC_COLORS = ("red", "green", "blue")
CAR_COLORS = ("red", "green", "blue", "yellow")


class GenerationError(RuntimeError):
    """Instance placement did not succeed within the retry budget."""


@dataclass(frozen=True)
class ToyClass:
    name: str
    shape: str
    color: str
    family: str


def family_classes(family: str) -> list[ToyClass]:
    if family == "discs-world":
        return [ToyClass(f"{c}-{s}", s, c, family) for s in DISC_SHAPES for c in DISC_COLORS]
    if family == "cars-grid":
        return [ToyClass(f"{c}-car", "car", c, family) for c in CAR_COLORS]
    raise ContractError(f"unknown family {family!r}; expected one of {FAMILIES}")


ALL_CLASSES: dict[str, ToyClass] = {c.name: c for fam in FAMILIES for c in family_classes(fam)}


def get_class(name: str) -> ToyClass:
    try:
        return ALL_CLASSES[name]
    except KeyError:
        raise ContractError(f"unknown class {name!r}") from None


@dataclass
class Sample:
    image: np.ndarray  # 3×H×W in [0, 1]
    class_name: str
    centers: np.ndarray  # n×2, (x, y) in pixel units
    density: np.ndarray  # 1×H×W
    distractor_class: str | None = None
    distractor_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def count(self) -> int:
        return int(len(self.centers))


@dataclass(frozen=True)
class ClassSplit:
    seen: tuple[str, ...]
    unseen: tuple[str, ...]


# ---------------------------------------------------------------------------
# density ground truth
# ---------------------------------------------------------------------------


def gaussian_density(centers: np.ndarray, sigma: float, height: int, width: int) -> np.ndarray:
    """Sum of unit-mass Gaussian kernels evaluated at pixel centres.

    Each kernel is truncated at the image border and renormalised, so the
    map's total mass equals the number of centres.
    """
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((1, height, width))
    if len(centers) == 0:
        return out
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    for cx, cy in centers:
        if not (0.0 <= cx < width and 0.0 <= cy < height):
            raise ContractError(f"center ({cx}, {cy}) lies outside the {width}x{height} image")
        gx = np.exp(-((xs - cx) ** 2) / (2 * sigma**2))
        gy = np.exp(-((ys - cy) ** 2) / (2 * sigma**2))
        out[0] += np.outer(gy / gy.sum(), gx / gx.sum())
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "triangle":
        return (dy <= 0.9 * r) & (np.abs(dx) <= 0.6 * (dy + r))
    if shape == "cross":
        arm = r / 2.8
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "car":
        return (np.abs(dx) <= 1.25 * r) & (np.abs(dy) <= 0.75 * r)
    raise ContractError(f"unknown shape {shape!r}")


def _paint(image: np.ndarray, cls: ToyClass, centers: np.ndarray, rng: np.random.Generator) -> None:
    _, h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    base = np.array(COLORS[cls.color])
    for cx, cy in centers:
        r = 2.8 + rng.uniform(-0.3, 0.3)
        mask = _shape_mask(cls.shape, xx - cx, yy - cy, r)
        color = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        image[:, mask] = color[:, None]
        if cls.shape == "car":
            roof = mask & (np.abs(xx - cx) <= 0.45 * r)
            image[:, roof] *= 0.6


def _scatter_centers(n: int, size: int, rng: np.random.Generator, existing: np.ndarray,
                     min_dist: float = 6.0, margin: float = 4.0, retries: int = 4000) -> np.ndarray:
    pts = [tuple(p) for p in existing]
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > retries:
            raise GenerationError(f"could not place {n} instances without overlap after {retries} attempts")
        p = rng.uniform(margin, size - margin, size=2)
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_dist**2 for q in pts):
            pts.append(tuple(p))
            out.append(p)
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _grid_slots(size: int, rng: np.random.Generator) -> np.ndarray:
    xs = np.arange(6.0, size - 4.0, 9.0)
    ys = np.arange(5.0, size - 4.0, 8.0)
    slots = np.array([(x, y) for y in ys for x in xs])
    return slots + rng.uniform(-0.5, 0.5, size=slots.shape)


def generate_sample(
    cls: ToyClass,
    count_range: tuple[int, int],
    seed: int | np.random.SeedSequence,
    *,
    distractors: bool = False,
    distractor_pool: list[ToyClass] | None = None,
    sigma: float = 1.5,
    size: int = 64,
    layout: str | None = None,
) -> Sample:
    """Render one image of ``cls`` with its point annotations and density map.

    ``layout`` defaults to the class's own family.  With ``distractors``
    set, instances of one other class from ``distractor_pool`` are painted
    too; they never enter the count or the density map.
    """
    lo, hi = int(count_range[0]), int(count_range[1])
    if lo < 1 or hi < lo:
        raise ContractError(f"invalid count range {count_range}")
    layout = layout or cls.family
    rng = np.random.default_rng(seed)
    count = int(rng.integers(lo, hi + 1))
    pool = [c for c in (distractor_pool or family_classes(cls.family)) if c.name != cls.name]
    other = pool[int(rng.integers(len(pool)))] if distractors and pool else None
    n_other = int(rng.integers(1, max(1, count // 2) + 1)) if other else 0

    if layout == "cars-grid":
        slots = _grid_slots(size, rng)
        if count + n_other > len(slots):
            raise GenerationError(f"{count + n_other} instances exceed {len(slots)} parking slots")
        order = rng.permutation(len(slots))
        centers = slots[order[:count]]
        other_centers = slots[order[count:count + n_other]]
    elif layout == "discs-world":
        centers = _scatter_centers(count, size, rng, np.zeros((0, 2)))
        other_centers = _scatter_centers(n_other, size, rng, centers)
    else:
        raise ContractError(f"unknown layout {layout!r}")

    image = 0.08 + 0.04 * rng.random((3, size, size))
    _paint(image, cls, centers, rng)
    if other is not None:
        _paint(image, other, other_centers, rng)
    image = np.clip(image, 0.0, 1.0)
    return Sample(
        image=image,
        class_name=cls.name,
        centers=centers,
        density=gaussian_density(centers, sigma, size, size),
        distractor_class=other.name if other else None,
        distractor_centers=other_centers,
    )


def hflip_augment(sample: Sample, p: float, seed: int | np.random.SeedSequence) -> Sample:
    """Mirror image, annotations, and density left-right with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"flip probability must lie in [0, 1], got {p}")
    if p == 0.0 or np.random.default_rng(seed).random() >= p:
        return sample
    return hflip(sample)


def hflip(sample: Sample) -> Sample:
    w = sample.image.shape[-1]

    def flip_pts(pts: np.ndarray) -> np.ndarray:
        out = pts.copy()
        out[:, 0] = w - out[:, 0]
        return out

    return replace(
        sample,
        image=sample.image[:, :, ::-1].copy(),
        density=sample.density[:, :, ::-1].copy(),
        centers=flip_pts(sample.centers),
        distractor_centers=flip_pts(sample.distractor_centers),
    )


def make_split(all_classes: list[str], seed: int, fraction_seen: float) -> ClassSplit:
    if len(all_classes) < 2:
        raise ContractError("a split needs at least two classes")
    n_seen = int(round(fraction_seen * len(all_classes)))
    if not 0 < n_seen < len(all_classes):
        raise ContractError(f"fraction_seen={fraction_seen} leaves one side of the split empty")
    order = np.random.default_rng(seed).permutation(len(all_classes))
    names = [all_classes[i] for i in order]
    return ClassSplit(seen=tuple(sorted(names[:n_seen])), unseen=tuple(sorted(names[n_seen:])))


def mean_nn_distance(centers: np.ndarray) -> float:
    c = np.asarray(centers, dtype=np.float64)
    if len(c) < 2:
        return float("nan")
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).mean())


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class Manifest:
    family: str = "discs-world"
    classes: list[str] | None = None
    split_seed: int = 0
    n_train: int = 400
    n_val: int = 50
    n_test: int = 100
    sigma: float = 1.5
    count_range: list[int] = field(default_factory=lambda: [3, 20])
    fraction_seen: float = 2.0 / 3.0
    distractors: bool = True
    sample_seed: int = 0
    image_size: int = 64

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ContractError(f"unknown family {self.family!r}")
        if self.classes is None:
            self.classes = [c.name for c in family_classes(self.family)]
        self.classes = list(self.classes)
        for name in self.classes:
            get_class(name)
        if len(self.count_range) != 2:
            raise ContractError("count_range must have two entries")
        self.count_range = [int(v) for v in self.count_range]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "Manifest":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ContractError(f"unknown manifest key(s): {', '.join(sorted(unknown))}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def split(self) -> ClassSplit:
        return make_split(list(self.classes), self.split_seed, self.fraction_seen)


def sample_seed(global_seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(global_seed), _SPLIT_CODES[split], int(index)])


def generate_set(manifest: Manifest, split: str, class_names: list[str] | tuple[str, ...], n: int) -> list[Sample]:
    """``n`` samples cycling through ``class_names``; sample i depends only on (seed, split, i)."""
    classes = [get_class(c) for c in class_names]
    pool = [get_class(c) for c in manifest.classes]
    return [
        generate_sample(
            classes[i % len(classes)],
            tuple(manifest.count_range),
            sample_seed(manifest.sample_seed, split, i),
            distractors=manifest.distractors,
            distractor_pool=pool,
            sigma=manifest.sigma,
            size=manifest.image_size,
            layout=manifest.family,
        )
        for i in range(n)
    ]


def build_datasets(manifest: Manifest) -> tuple[ClassSplit, dict[str, list[Sample]]]:
    """Train/val on seen classes (disjoint images), test on unseen classes."""
    split = manifest.split()
    sets = {
        "train": generate_set(manifest, "train", split.seen, manifest.n_train),
        "val": generate_set(manifest, "val", split.seen, manifest.n_val),
        "test": generate_set(manifest, "test", split.unseen, manifest.n_test),
    }
    return split, sets


def export_sample(sample: Sample, stem: str | Path) -> None:
    """Write ``<stem>.pgm`` (three colour planes stacked vertically) and ``<stem>.csv`` centres."""
    from .export import write_pgm

    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    c, h, w = sample.image.shape
    write_pgm(sample.image.reshape(c * h, w), stem.with_suffix(".pgm"))
    with open(stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "class"])
        for x, y in sample.centers:
            writer.writerow([f"{x:.9g}", f"{y:.9g}", sample.class_name])
        for x, y in sample.distractor_centers:
            writer.writerow([f"{x:.9g}", f"{y:.9g}", sample.distractor_class])
