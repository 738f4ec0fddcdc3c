"""EfficientNet-style MBConv backbone with a CBAM-refined classifier head."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .cbam import CbamParams, cbam_forward, validate_cbam_shape
from .tensor import Parameter, ShapeError, Tensor

HEAD_MODES = ("flatten", "pool")


class ConfigError(ValueError):
    """Raised when a network configuration violates one of its invariants."""


@dataclass(frozen=True)
class MBConvSpec:
    expansion_ratio: float
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    repeats: int = 1
    se_ratio: float | None = 0.25

    def block_specs(self) -> list[MBConvSpec]:
        """Expand ``repeats`` into per-block specs (stride and width only on the first)."""
        first = replace(self, repeats=1)
        rest = replace(self, repeats=1, stride=1, in_channels=self.out_channels)
        return [first] + [rest] * (self.repeats - 1)

    @property
    def expanded(self) -> int:
        return int(round(self.in_channels * self.expansion_ratio))

    @property
    def squeezed(self) -> int:
        return max(1, int(self.in_channels * self.se_ratio)) if self.se_ratio else 0

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class NetworkConfig:
    stem_channels: int
    stages: tuple[MBConvSpec, ...]
    head_channels: int
    input_resolution: int
    num_classes: int = 11
    depth_mult: float = 1.0
    width_mult: float = 1.0
    resolution_mult: float = 1.0
    stem_stride: int = 2
    head: str = "flatten"
    use_cbam: bool = True
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    divisor: int = 8

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def total_stride(self) -> int:
        s = self.stem_stride
        for st in self.stages:
            s *= st.stride
        return s

    @property
    def feature_size(self) -> int:
        return self.input_resolution // self.total_stride

    def validate(self) -> NetworkConfig:
        if not self.stages:
            raise ConfigError("stages: at least one MBConv stage is required")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes: need >= 2, got {self.num_classes}")
        if self.head not in HEAD_MODES:
            raise ConfigError(f"head: must be one of {HEAD_MODES}, got {self.head!r}")
        if self.stem_stride not in (1, 2):
            raise ConfigError("stem_stride: must be 1 or 2")
        for name in ("stem_channels", "head_channels", "input_resolution"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        prev = self.stem_channels
        for i, st in enumerate(self.stages, start=1):
            where = f"stages[{i}]"
            if st.in_channels != prev:
                raise ConfigError(f"{where}.in_channels={st.in_channels} does not match previous output {prev}")
            if st.kernel % 2 == 0 or st.kernel < 1:
                raise ConfigError(f"{where}.kernel={st.kernel} must be odd")
            if st.stride not in (1, 2):
                raise ConfigError(f"{where}.stride={st.stride} must be 1 or 2")
            if st.repeats < 1 or st.expansion_ratio <= 0 or st.out_channels < 1:
                raise ConfigError(f"{where}: repeats, expansion_ratio and out_channels must be positive")
            if st.se_ratio is not None and not 0 < st.se_ratio <= 1:
                raise ConfigError(f"{where}.se_ratio={st.se_ratio} must lie in (0, 1]")
            prev = st.out_channels
        if self.input_resolution % self.total_stride:
            raise ConfigError(
                f"input_resolution={self.input_resolution} not divisible by cumulative stride {self.total_stride}"
            )
        if self.use_cbam:
            try:
                validate_cbam_shape(self.head_channels, self.cbam_reduction, self.cbam_kernel)
            except ShapeError as exc:
                raise ConfigError(f"cbam: {exc}") from None
        return self


def round_to_divisor(channels: float, divisor: int = 8) -> int:
    """Round to the nearest multiple of ``divisor`` without dropping below 90%."""
    new = max(divisor, int(channels + divisor / 2) // divisor * divisor)
    if new < 0.9 * channels:
        new += divisor
    return int(new)


def compound_scale(base: NetworkConfig, depth_mult: float = 1.0, width_mult: float = 1.0,
                   resolution_mult: float = 1.0) -> NetworkConfig:
    if min(depth_mult, width_mult, resolution_mult) <= 0:
        raise ConfigError("compound_scale: multipliers must be positive")
    if (depth_mult, width_mult, resolution_mult) == (1.0, 1.0, 1.0):
        return base

    def width(c):
        return c if width_mult == 1.0 else round_to_divisor(c * width_mult, base.divisor)

    stages = tuple(
        replace(
            st,
            in_channels=width(st.in_channels),
            out_channels=width(st.out_channels),
            repeats=int(math.ceil(st.repeats * depth_mult)),
        )
        for st in base.stages
    )
    scaled = replace(
        base,
        stem_channels=width(base.stem_channels),
        stages=stages,
        head_channels=width(base.head_channels),
        input_resolution=int(round(base.input_resolution * resolution_mult)),
        depth_mult=base.depth_mult * depth_mult,
        width_mult=base.width_mult * width_mult,
        resolution_mult=base.resolution_mult * resolution_mult,
    )
    return scaled.validate()


def efftiny(num_classes: int = 11, **overrides) -> NetworkConfig:
    """Desk-scale reference network used throughout the tests."""
    cfg = NetworkConfig(
        stem_channels=8,
        stages=(
            MBConvSpec(1, 3, 1, 8, 8, 1),
            MBConvSpec(4, 3, 2, 8, 16, 2),
            MBConvSpec(4, 5, 2, 16, 32, 2),
        ),
        head_channels=64,
        input_resolution=64,
        num_classes=num_classes,
    )
    return replace(cfg, **overrides).validate()


def efficientnet_b0(num_classes: int = 1000, resolution: int = 224, **overrides) -> NetworkConfig:
    """The B0 baseline stage table (stem 32, head 1280)."""
    cfg = NetworkConfig(
        stem_channels=32,
        stages=(
            MBConvSpec(1, 3, 1, 32, 16, 1),
            MBConvSpec(6, 3, 2, 16, 24, 2),
            MBConvSpec(6, 5, 2, 24, 40, 2),
            MBConvSpec(6, 3, 2, 40, 80, 3),
            MBConvSpec(6, 5, 1, 80, 112, 3),
            MBConvSpec(6, 5, 2, 112, 192, 4),
            MBConvSpec(6, 3, 1, 192, 320, 1),
        ),
        head_channels=1280,
        input_resolution=resolution,
        num_classes=num_classes,
    )
    return replace(cfg, **overrides).validate()


def efficientnet_b7(num_classes: int = 11, resolution: int = 256, **overrides) -> NetworkConfig:
    """B0 scaled by depth 3.1 and width 2.0; resolution set directly (256 here)."""
    scaled = compound_scale(efficientnet_b0(num_classes=num_classes), depth_mult=3.1, width_mult=2.0)
    return replace(scaled, input_resolution=resolution, **overrides).validate()


PRESETS = {"efftiny": efftiny, "b0": efficientnet_b0, "b7": efficientnet_b7}


# -- layers ---------------------------------------------------------------------


def _conv_init(rng, cout, cin_per_group, k, groups, dtype):
    fan_out = k * k * cout // groups
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=(cout, cin_per_group, k, k)).astype(dtype)


class Conv2d:
    def __init__(self, name, cin, cout, k, rng, stride=1, groups=1, bias=False, dtype=np.float32):
        self.stride, self.groups, self.padding = stride, groups, (k - 1) // 2
        self.weight = Parameter(_conv_init(rng, cout, cin // groups, k, groups, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype), f"{name}.bias", decay=False) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d:
    def __init__(self, name, channels, dtype=np.float32):
        self.name = name
        self.scale = Parameter(np.ones(channels, dtype), f"{name}.scale", decay=False)
        self.shift = Parameter(np.zeros(channels, dtype), f"{name}.shift", decay=False)
        self.stats = ops.RunningStats.fresh(channels, dtype)
        self.update_stats = True

    def parameters(self):
        return [self.scale, self.shift]

    def __call__(self, x, training):
        return ops.batch_norm(x, self.scale, self.shift, self.stats, training, update_stats=self.update_stats)


class MBConvBlock:
    """expand 1x1 -> depthwise kxk -> SE -> project 1x1, skip-add when shapes allow."""

    def __init__(self, name, spec: MBConvSpec, rng, dtype=np.float32):
        self.spec = spec
        exp = spec.expanded
        self.expand = None
        if spec.expansion_ratio != 1:
            self.expand = Conv2d(f"{name}.expand", spec.in_channels, exp, 1, rng, dtype=dtype)
            self.expand_bn = BatchNorm2d(f"{name}.expand_bn", exp, dtype)
        self.dwconv = Conv2d(f"{name}.dwconv", exp, exp, spec.kernel, rng, stride=spec.stride, groups=exp, dtype=dtype)
        self.dw_bn = BatchNorm2d(f"{name}.dw_bn", exp, dtype)
        self.se = None
        if spec.se_ratio:
            sq = spec.squeezed
            self.se = (
                Conv2d(f"{name}.se.reduce", exp, sq, 1, rng, bias=True, dtype=dtype),
                Conv2d(f"{name}.se.expand", sq, exp, 1, rng, bias=True, dtype=dtype),
            )
        self.project = Conv2d(f"{name}.project", exp, spec.out_channels, 1, rng, dtype=dtype)
        self.project_bn = BatchNorm2d(f"{name}.project_bn", spec.out_channels, dtype)

    def layers(self):
        out = []
        if self.expand is not None:
            out += [self.expand, self.expand_bn]
        out += [self.dwconv, self.dw_bn]
        if self.se is not None:
            out += list(self.se)
        out += [self.project, self.project_bn]
        return out

    def __call__(self, x, training):
        h = x
        if self.expand is not None:
            h = ops.silu(self.expand_bn(self.expand(h), training))
        h = ops.silu(self.dw_bn(self.dwconv(h), training))
        if self.se is not None:
            reduce, expand = self.se
            s = ops.pool_global_spatial(h, "avg")
            s = ops.sigmoid(expand(ops.silu(reduce(s))))
            h = h * s
        h = self.project_bn(self.project(h), training)
        if self.spec.has_skip:
            h = h + x
        return h


class Model:
    """Stem -> MBConv stages -> 1x1 head -> CBAM -> flatten (or pool) -> FC."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.stem = Conv2d("stem.conv", 3, config.stem_channels, 3, rng, stride=config.stem_stride, dtype=dtype)
        self.stem_bn = BatchNorm2d("stem.bn", config.stem_channels, dtype)
        self.stages: list[list[MBConvBlock]] = []
        for i, st in enumerate(config.stages, start=1):
            self.stages.append(
                [MBConvBlock(f"stage{i}.block{j}", spec, rng, dtype) for j, spec in enumerate(st.block_specs(), start=1)]
            )
        last = config.stages[-1].out_channels
        self.head = Conv2d("head.conv", last, config.head_channels, 1, rng, dtype=dtype)
        self.head_bn = BatchNorm2d("head.bn", config.head_channels, dtype)
        self.cbam = (
            CbamParams.init(config.head_channels, config.cbam_reduction, config.cbam_kernel, rng, dtype=dtype)
            if config.use_cbam
            else None
        )
        self.init_classifier(rng)

    def init_classifier(self, rng: np.random.Generator) -> None:
        """(Re)draw the FC head, uniform +-1/sqrt(fan_in)."""
        cfg = self.config
        d = self.flat_features
        bound = 1.0 / math.sqrt(d)
        self.fc_weight = Parameter(rng.uniform(-bound, bound, (d, cfg.num_classes)).astype(self.dtype), "classifier.weight")
        self.fc_bias = Parameter(rng.uniform(-bound, bound, cfg.num_classes).astype(self.dtype), "classifier.bias", decay=False)

    @property
    def flat_features(self) -> int:
        c = self.config.head_channels
        return c if self.config.head == "pool" else c * self.config.feature_size ** 2

    def _layers(self):
        yield self.stem
        yield self.stem_bn
        for blocks in self.stages:
            for b in blocks:
                yield from b.layers()
        yield self.head
        yield self.head_bn

    def batchnorms(self) -> list[BatchNorm2d]:
        return [l for l in self._layers() if isinstance(l, BatchNorm2d)]

    def named_parameters(self) -> OrderedDict[str, Parameter]:
        params: OrderedDict[str, Parameter] = OrderedDict()
        for layer in self._layers():
            for p in layer.parameters():
                params[p.name] = p
        if self.cbam is not None:
            for p in self.cbam.parameters():
                params[p.name] = p
        params[self.fc_weight.name] = self.fc_weight
        params[self.fc_bias.name] = self.fc_bias
        return params

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> OrderedDict[str, np.ndarray]:
        bufs: OrderedDict[str, np.ndarray] = OrderedDict()
        for bn in self.batchnorms():
            bufs[f"{bn.name}.running_mean"] = bn.stats.mean
            bufs[f"{bn.name}.running_var"] = bn.stats.var
        return bufs

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        for bn in self.batchnorms():
            if name == f"{bn.name}.running_mean":
                bn.stats.mean = value.astype(self.dtype)
                return
            if name == f"{bn.name}.running_var":
                bn.stats.var = value.astype(self.dtype)
                return
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def features(self, x: Tensor, training: bool) -> Tensor:
        h = ops.silu(self.stem_bn(self.stem(x), training))
        for blocks in self.stages:
            for block in blocks:
                h = block(h, training)
        return ops.silu(self.head_bn(self.head(h), training))

    def forward(self, x, mode: str = "eval", return_features: bool = False):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        r = self.config.input_resolution
        if x.ndim != 4 or x.shape[1:] != (3, r, r):
            raise ShapeError(f"expected input (N, 3, {r}, {r}), got {x.shape}")
        feats = self.features(x, mode == "train")
        h = cbam_forward(feats, self.cbam) if self.cbam is not None else feats
        if self.config.head == "pool":
            h = ops.pool_global_spatial(h, "avg")
        logits = ops.linear(h.flatten(), self.fc_weight, self.fc_bias)
        return (logits, feats) if return_features else logits

    __call__ = forward


def build_model(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed=seed, dtype=dtype)


def top_level_group(name: str) -> str:
    return name.split(".", 1)[0]


def count_params(model: Model, trainable_only: bool = False) -> int:
    return sum(p.data.size for p in model.parameters() if p.trainable or not trainable_only)


def params_by_group(model: Model, trainable_only: bool = False) -> OrderedDict[str, int]:
    groups: OrderedDict[str, int] = OrderedDict()
    for p in model.parameters():
        if trainable_only and not p.trainable:
            continue
        g = top_level_group(p.name)
        groups[g] = groups.get(g, 0) + p.data.size
    return groups


# -- static accounting ----------------------------------------------------------


@dataclass
class LayerRow:
    name: str
    kind: str
    out_shape: tuple[int, ...]
    params: int
    macs: int


@dataclass
class _Tracer:
    rows: list[LayerRow] = field(default_factory=list)

    def conv(self, name, cin, cout, k, stride, groups, h, bias=False):
        pad = (k - 1) // 2
        ho = ops.conv_output_size(h, k, stride, pad)
        params = cout * (cin // groups) * k * k + (cout if bias else 0)
        macs = cout * (cin // groups) * k * k * ho * ho
        self.rows.append(LayerRow(name, "conv", (cout, ho, ho), params, macs))
        return ho

    def bn(self, name, c, h):
        self.rows.append(LayerRow(name, "bn", (c, h, h), 2 * c, 0))

    def fc(self, name, d, k, branches=1):
        self.rows.append(LayerRow(name, "fc", (k,), d * k + k, d * k * branches))


def layer_table(config: NetworkConfig, resolution: int | None = None) -> list[LayerRow]:
    """Per-layer output shape, parameter count and MACs, by shape propagation.

    Activations, pooling and normalization contribute no MACs. The two CBAM
    MLP branches are each counted as one FC pass.
    """
    config.validate()
    r = config.input_resolution if resolution is None else resolution
    t = _Tracer()
    h = t.conv("stem.conv", 3, config.stem_channels, 3, config.stem_stride, 1, r)
    t.bn("stem.bn", config.stem_channels, h)
    for i, st in enumerate(config.stages, start=1):
        for j, spec in enumerate(st.block_specs(), start=1):
            name = f"stage{i}.block{j}"
            exp = spec.expanded
            if spec.expansion_ratio != 1:
                t.conv(f"{name}.expand", spec.in_channels, exp, 1, 1, 1, h)
                t.bn(f"{name}.expand_bn", exp, h)
            h = t.conv(f"{name}.dwconv", exp, exp, spec.kernel, spec.stride, exp, h)
            t.bn(f"{name}.dw_bn", exp, h)
            if spec.se_ratio:
                t.conv(f"{name}.se.reduce", exp, spec.squeezed, 1, 1, 1, 1, bias=True)
                t.conv(f"{name}.se.expand", spec.squeezed, exp, 1, 1, 1, 1, bias=True)
            t.conv(f"{name}.project", exp, spec.out_channels, 1, 1, 1, h)
            t.bn(f"{name}.project_bn", spec.out_channels, h)
    c = config.head_channels
    t.conv("head.conv", config.stages[-1].out_channels, c, 1, 1, 1, h)
    t.bn("head.bn", c, h)
    if config.use_cbam:
        hid = c // config.cbam_reduction
        t.fc("cbam.mlp.1", c, hid, branches=2)
        t.fc("cbam.mlp.2", hid, c, branches=2)
        t.conv("cbam.spatial", 2, 1, config.cbam_kernel, 1, 1, h, bias=True)
    d = c if config.head == "pool" else c * h * h
    t.fc("classifier", d, config.num_classes)
    return t.rows


def count_macs(config: NetworkConfig, resolution: int | None = None) -> int:
    return sum(row.macs for row in layer_table(config, resolution))
