"""Experiment configuration: strict TOML/JSON loading with flag overrides."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import PRESETS, ConfigError, MBConvSpec, NetworkConfig, compound_scale
from .data import AugmentationPolicy, NormalizationStats
from .train import BatchSizes, LrSchedule, TrainConfig


@dataclass
class DataSection:
    root: str | None = None


@dataclass
class NetworkSection:
    preset: str = "efftiny"
    num_classes: int = 11
    resolution: int = 0
    head: str = "flatten"
    use_cbam: bool = True
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    se: bool = True
    depth_mult: float = 1.0
    width_mult: float = 1.0
    resolution_mult: float = 1.0
    stem_channels: int = 0
    head_channels: int = 0
    stages: list = field(default_factory=list)


@dataclass
class TrainSection:
    epochs: int = 20
    freeze: str = "full"
    partial_stages: int = 1
    freeze_bn_stats: bool = False
    init_checkpoint: str = ""
    reinit_head: bool = False
    runs: int = 1


@dataclass
class OptimSection:
    lr: float = 0.01
    halve_every: int = 5
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-5


@dataclass
class BatchSection:
    train: int = 16
    val: int = 32
    eval: int = 32


@dataclass
class AugmentSection:
    enabled: bool = True
    rotation_degrees: float = 15.0
    hflip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    erase_prob: float = 0.25
    erase_area: list = field(default_factory=lambda: [0.02, 0.2])
    erase_aspect: list = field(default_factory=lambda: [0.3, 3.3])
    erase_fill: str = "mean"


@dataclass
class NormalizationSection:
    mean: list = field(default_factory=lambda: [0.485, 0.456, 0.406])
    std: list = field(default_factory=lambda: [0.229, 0.224, 0.225])


@dataclass
class EvalSection:
    checkpoint: str = ""
    split: str = "evaluation"
    heatmap: bool = True


@dataclass
class BenchSection:
    batch_size: int = 32
    warmup: int = 5
    timed: int = 50


@dataclass
class PreviewSection:
    count: int = 8
    split: str = "training"


@dataclass
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    optim: OptimSection = field(default_factory=OptimSection)
    batch: BatchSection = field(default_factory=BatchSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    normalization: NormalizationSection = field(default_factory=NormalizationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    preview: PreviewSection = field(default_factory=PreviewSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- strict loading ---------------------------------------------------------------


def _check_type(value, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {type(value).__name__}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {type(value).__name__}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {type(value).__name__}")
        return list(value)
    return value


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        key = prefix + f.name
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, data[f.name], key + ".")
        else:
            kwargs[f.name] = _check_type(data[f.name], hint, key)
    return cls(**kwargs)


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a table")
    node[parts[-1]] = value


def parse_value(text: str):
    """Parse a flag value as a TOML scalar/array, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def read_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text) if text.strip() else {}
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(path=None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load ``path`` (TOML or JSON), apply dotted ``overrides``, validate.

    Unknown keys, type mismatches and invariant violations raise
    ``ConfigError`` naming the key path.
    """
    tree = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        _set_dotted(tree, key, value)
    cfg = _build(ExperimentConfig, tree)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    for key in ("train", "val", "eval"):
        if getattr(cfg.batch, key) < 1:
            raise ConfigError(f"batch.{key}: must be >= 1")
    checks = [
        ("train.epochs", cfg.train.epochs >= 1),
        ("train.runs", cfg.train.runs >= 1),
        ("train.freeze", cfg.train.freeze in ("full", "feature_extraction", "partial")),
        ("optim.lr", cfg.optim.lr > 0),
        ("optim.halve_every", cfg.optim.halve_every >= 1),
        ("optim.momentum", 0 <= cfg.optim.momentum < 1),
        ("optim.weight_decay", cfg.optim.weight_decay >= 0),
        ("bench.timed", cfg.bench.timed >= 1),
        ("bench.batch_size", cfg.bench.batch_size >= 1),
        ("network.preset", cfg.network.preset in (*PRESETS, "custom")),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"{key}: invalid value")
    try:
        augment_policy(cfg)
    except ValueError as exc:
        raise ConfigError(f"augment: {exc}") from None
    try:
        NormalizationStats(tuple(cfg.normalization.mean), tuple(cfg.normalization.std))
    except ValueError as exc:
        raise ConfigError(f"normalization: {exc}") from None
    network_config(cfg)


def network_config(cfg: ExperimentConfig) -> NetworkConfig:
    n = cfg.network
    common = dict(num_classes=n.num_classes, head=n.head, use_cbam=n.use_cbam,
                  cbam_reduction=n.cbam_reduction, cbam_kernel=n.cbam_kernel)
    try:
        if n.preset == "custom":
            if not n.stages or n.stem_channels < 1 or n.head_channels < 1 or n.resolution < 1:
                raise ConfigError("network: custom preset needs stem_channels, head_channels, resolution and stages")
            stages = []
            for i, st in enumerate(n.stages):
                if not isinstance(st, dict):
                    raise ConfigError(f"network.stages[{i}]: expected a table")
                try:
                    stages.append(MBConvSpec(**st))
                except TypeError as exc:
                    raise ConfigError(f"network.stages[{i}]: {exc}") from None
            base = NetworkConfig(n.stem_channels, tuple(stages), n.head_channels, n.resolution, **common)
        else:
            base = PRESETS[n.preset](**common)
            if n.resolution:
                base = dataclasses.replace(base, input_resolution=n.resolution)
        if not n.se:
            base = dataclasses.replace(base, stages=tuple(dataclasses.replace(s, se_ratio=None) for s in base.stages))
        return compound_scale(base.validate(), n.depth_mult, n.width_mult, n.resolution_mult)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith("network") else f"network.{msg}") from None


def augment_policy(cfg: ExperimentConfig) -> AugmentationPolicy | None:
    a = cfg.augment
    if not a.enabled:
        return None
    return AugmentationPolicy(
        rotation_degrees=a.rotation_degrees,
        hflip_prob=a.hflip_prob,
        brightness=a.brightness,
        contrast=a.contrast,
        saturation=a.saturation,
        erase_prob=a.erase_prob,
        erase_area=tuple(a.erase_area),
        erase_aspect=tuple(a.erase_aspect),
        erase_fill=a.erase_fill,
    )


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        root=cfg.data.root,
        network=network_config(cfg),
        epochs=cfg.train.epochs,
        batch=BatchSizes(cfg.batch.train, cfg.batch.val, cfg.batch.eval),
        seed=cfg.seed,
        freeze=cfg.train.freeze,
        partial_stages=cfg.train.partial_stages,
        freeze_bn_stats=cfg.train.freeze_bn_stats,
        schedule=LrSchedule(cfg.optim.lr, cfg.optim.halve_every),
        momentum=cfg.optim.momentum,
        nesterov=cfg.optim.nesterov,
        weight_decay=cfg.optim.weight_decay,
        augment=augment_policy(cfg),
        stats=NormalizationStats(tuple(cfg.normalization.mean), tuple(cfg.normalization.std)),
        init_checkpoint=cfg.train.init_checkpoint or None,
        reinit_head=cfg.train.reinit_head,
        deterministic=cfg.deterministic,
    )
