"""Training configuration, presets and the JSON config-file format."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dbf.data import GenSpec
from dbf.errors import ConfigError

MODALITY_ORDER = ("t", "v", "a")


@dataclass
class Ablation:
    mimax_on: bool = True
    bottleneck_on: bool = True
    use_modalities: tuple[str, ...] = ("t", "v", "a")
    center_modality: str = "t"

    def __post_init__(self):
        if isinstance(self.use_modalities, str):
            self.use_modalities = tuple(m for m in self.use_modalities.replace(",", "") if m)
        order = {m: i for i, m in enumerate(MODALITY_ORDER)}
        unknown = [m for m in self.use_modalities if m not in order]
        if unknown:
            raise ConfigError(f"unknown modalities {unknown}; expected a subset of t, v, a")
        self.use_modalities = tuple(sorted(set(self.use_modalities), key=order.get))


@dataclass
class TrainConfig:
    """Hyper-parameters; the defaults equal the ``mosi`` preset."""

    batch_size: int = 32
    bottleneck_length: int = 2
    fusion_layers: int = 4
    pre_layers: int = 1
    alpha: float = 0.05
    lr_new: float = 2e-5
    lr_backbone: float = 1e-4
    warmup_steps: int | None = None
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    fusion_dim: int = 128
    temperature: float = 1.0
    n_heads: int = 4
    dropout: float = 0.1
    eval_batch_size: int = 256

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)

    def validate(self) -> TrainConfig:
        ab = self.ablation
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not ab.use_modalities:
            raise ConfigError("use_modalities must not be empty")
        if ab.center_modality not in ab.use_modalities:
            raise ConfigError(
                f"center modality {ab.center_modality!r} is not in use_modalities "
                f"{list(ab.use_modalities)}"
            )
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if ab.mimax_on and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when MI-Max is enabled")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.fusion_layers < 1 or self.pre_layers < 0:
            raise ConfigError("need fusion_layers >= 1 and pre_layers >= 0")
        if self.fusion_dim % self.n_heads:
            raise ConfigError(f"fusion_dim {self.fusion_dim} not divisible by n_heads {self.n_heads}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ablation"]["use_modalities"] = list(self.ablation.use_modalities)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        ablation = raw.pop("ablation", {})
        if not isinstance(ablation, dict):
            raise ConfigError("ablation must be a mapping")
        ab_known = {f.name for f in fields(Ablation)}
        ab_unknown = sorted(set(ablation) - ab_known)
        if ab_unknown:
            raise ConfigError(f"unknown ablation keys: {ab_unknown}")
        try:
            cfg = cls(ablation=Ablation(**ablation), **raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    def replace(self, **changes) -> TrainConfig:
        cfg = copy.deepcopy(self)
        ablation_changes = changes.pop("ablation", None)
        for k, v in changes.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
        if ablation_changes:
            cfg.ablation = Ablation(**{**asdict(cfg.ablation), **ablation_changes})
        return cfg.validate()


PRESETS = {
    "mosi": dict(batch_size=32, bottleneck_length=2, fusion_layers=4, alpha=0.05,
                 lr_new=2e-5, lr_backbone=1e-4, fusion_dim=128),
    "mosei": dict(batch_size=96, bottleneck_length=4, fusion_layers=4, alpha=0.1,
                  lr_new=2e-3, lr_backbone=5e-5, fusion_dim=128),
    # Small enough to train from scratch on one CPU core in seconds per epoch.
    "desk": dict(batch_size=32, bottleneck_length=2, fusion_layers=4, pre_layers=1,
                 alpha=0.05, lr_new=2e-3, lr_backbone=2e-3, fusion_dim=32, n_heads=4,
                 max_epochs=60, patience=10, dropout=0.0),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides}).validate()


@dataclass
class RunConfig:
    """Contents of a config file: training fields plus an optional ``data`` block."""

    train: TrainConfig
    data: GenSpec

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "data": self.data.to_dict()}


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        return raw


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into ``ablation`` and ``data``."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        target = raw
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot override inside non-mapping key {part!r}")
        target[parts[-1]] = parse_value(value)
    return raw


def load_run_config(path=None, overrides: list[str] | None = None,
                    seed: int | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    raw = apply_overrides(raw, overrides or [])
    base = raw.pop("preset", None)
    data_raw = raw.pop("data", {})
    if not isinstance(data_raw, dict):
        raise ConfigError("data must be a mapping")
    if base is not None:
        raw = {**PRESETS.get(base, {}), **raw}
        if base not in PRESETS:
            raise ConfigError(f"unknown preset {base!r}")
    if seed is not None:
        raw["seed"] = seed
        data_raw.setdefault("seed", seed)
    train = TrainConfig.from_dict(raw)
    data = GenSpec.from_dict(data_raw)
    return RunConfig(train, data)
