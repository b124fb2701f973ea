"""Strict JSON-backed configuration objects."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .data import Manifest
from .tensor import ContractError


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _from_dict(cls, obj: Any, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(path or "<root>", f"expected a JSON object, got {type(obj).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(fields))
    if unknown:
        raise ConfigError(f"{path}{unknown[0]}", "unknown key")
    kwargs = {}
    for name, value in obj.items():
        if name == "model":
            value = _from_dict(ModelConfig, value, f"{path}model.")
        kwargs[name] = value
    return cls(**kwargs)


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_vis: int = 64
    vis_layers: int = 6
    vis_heads: int = 4
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_len: int = 16
    c_dec: int = 32
    upsample: list[int] = field(default_factory=lambda: [2, 2, 2, 1])
    prompt_init: float = 0.05
    head_bias: float = -4.0
    text_seed: int = 0

    def validate(self, prefix: str = "model.") -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(prefix + "patch_size", f"{self.patch_size} does not divide image_size {self.image_size}")
        if self.d_vis % self.vis_heads:
            raise ConfigError(prefix + "vis_heads", "must divide d_vis")
        if self.d_text % self.text_heads:
            raise ConfigError(prefix + "text_heads", "must divide d_text")
        if self.max_len < 3:
            raise ConfigError(prefix + "max_len", "must be at least 3")
        if any(f not in (1, 2) for f in self.upsample):
            raise ConfigError(prefix + "upsample", "factors must be 1 or 2")
        grid = self.image_size // self.patch_size
        out = grid
        for f in self.upsample:
            out *= f
        if out != self.image_size:
            raise ConfigError(prefix + "upsample", f"schedule reaches {out}, not image_size {self.image_size}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 200
    batch_size: int = 8
    lambda_rank: float = 1e-6
    tau: float = 1.0
    thresholds: list[float] = field(default_factory=lambda: [0.8, 0.6, 0.4])
    num_prompts: int = 10
    spt_layers: list[int] = field(default_factory=lambda: [1, 6])
    tap_map: dict[str, int] = field(default_factory=lambda: {"3": 2, "4": 3, "5": 4})
    use_spt: bool = True
    use_lat: bool = True
    use_sasc: bool = True
    condition_spt_on_text: bool = True
    filter_sasc_with_map: bool = True
    prompt_mode: str = "plural"
    seed: int = 0
    hflip_p: float = 0.5
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)

    FLAGS = ("use_spt", "use_lat", "use_sasc", "condition_spt_on_text", "filter_sasc_with_map")

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = _from_dict(ModelConfig, self.model, "model.")
        self.tap_map = {str(k): int(v) for k, v in dict(self.tap_map).items()}
        self.validate()

    def validate(self) -> None:
        m = self.model
        m.validate()
        checks = [
            ("lr", self.lr >= 0, "must be nonnegative"),
            ("weight_decay", self.weight_decay >= 0, "must be nonnegative"),
            ("epochs", isinstance(self.epochs, int) and self.epochs >= 0, "must be a nonnegative integer"),
            ("batch_size", isinstance(self.batch_size, int) and self.batch_size >= 1, "must be a positive integer"),
            ("lambda_rank", self.lambda_rank >= 0, "must be nonnegative"),
            ("tau", self.tau > 0, "must be positive"),
            ("thresholds", len(self.thresholds) > 0 and all(0 <= r < 1 for r in self.thresholds), "values must lie in [0, 1)"),
            ("num_prompts", isinstance(self.num_prompts, int) and self.num_prompts >= 0, "must be a nonnegative integer"),
            ("spt_layers", len(self.spt_layers) == 2 and 1 <= self.spt_layers[0] <= self.spt_layers[1] <= m.vis_layers,
             f"must be [first, last] within 1..{m.vis_layers}"),
            ("prompt_mode", self.prompt_mode in ("singular", "plural"), "must be 'singular' or 'plural'"),
            ("hflip_p", 0 <= self.hflip_p <= 1, "must lie in [0, 1]"),
            ("betas", len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), "must be two values in [0, 1)"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        for flag in self.FLAGS:
            if not isinstance(getattr(self, flag), bool):
                raise ConfigError(flag, "must be true or false")
        units = list(self.tap_map.values())
        if len(set(units)) != len(units):
            raise ConfigError("tap_map", "must be injective")
        for layer, unit in self.tap_map.items():
            if not layer.isdigit() or not 1 <= int(layer) <= m.vis_layers:
                raise ConfigError("tap_map", f"encoder layer {layer} outside 1..{m.vis_layers}")
            if not 1 <= unit <= len(m.upsample):
                raise ConfigError("tap_map", f"decoder unit {unit} outside 1..{len(m.upsample)}")

    @property
    def effective_taps(self) -> dict[int, int]:
        return {int(k): v for k, v in self.tap_map.items()} if self.use_sasc else {}

    @property
    def prompt_layers(self) -> list[int]:
        return list(range(self.spt_layers[0], self.spt_layers[1] + 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        try:
            return _from_dict(cls, obj, "")
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from exc

    def replace(self, **changes: Any) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


@dataclass
class RunConfig:
    """TrainConfig keys at the top level plus ``manifest`` and ``out_dir``."""

    train: TrainConfig
    manifest: Manifest
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "manifest": self.manifest.to_dict(), "out_dir": self.out_dir}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("<root>", "expected a JSON object")
        obj = dict(obj)
        manifest = obj.pop("manifest", None)
        out_dir = obj.pop("out_dir", None)
        if out_dir is not None and not isinstance(out_dir, str):
            raise ConfigError("out_dir", "must be a string path")
        try:
            if manifest is None:
                man = Manifest()
            elif isinstance(manifest, str):
                path = Path(manifest)
                if not path.is_absolute() and base_dir is not None:
                    path = base_dir / path
                if not path.exists():
                    raise ConfigError("manifest", f"manifest file not found: {path}")
                man = Manifest.load(path)
            elif isinstance(manifest, dict):
                man = Manifest.from_dict(manifest)
            else:
                raise ConfigError("manifest", "must be a path or an object")
        except ContractError as exc:
            raise ConfigError("manifest", str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("manifest", f"invalid JSON: {exc}") from exc
        return cls(train=TrainConfig.from_dict(obj), manifest=man, out_dir=out_dir)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(obj, base_dir=path.parent)
