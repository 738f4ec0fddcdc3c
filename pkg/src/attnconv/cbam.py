"""Convolutional Block Attention Module: channel attention, then spatial attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class CbamParams:
    """Shared channel MLP (C -> C/r -> C) plus a 2->1 k x k spatial kernel."""

    reduction: int
    mlp_w1: Parameter
    mlp_b1: Parameter
    mlp_w2: Parameter
    mlp_b2: Parameter
    spatial_kernel: Parameter
    spatial_bias: Parameter

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[0]

    @property
    def kernel(self) -> int:
        return self.spatial_kernel.shape[-1]

    @classmethod
    def init(
        cls,
        channels: int,
        reduction: int = 16,
        kernel: int = 7,
        rng: np.random.Generator | None = None,
        prefix: str = "cbam",
        dtype=np.float32,
    ) -> CbamParams:
        """Draw fresh parameters: uniform +-1/sqrt(fan_in) MLP weights,
        fan-out Gaussian spatial kernel, zero biases."""
        validate_cbam_shape(channels, reduction, kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = channels // reduction
        b1 = 1.0 / np.sqrt(channels)
        b2 = 1.0 / np.sqrt(hidden)
        w1 = rng.uniform(-b1, b1, size=(channels, hidden))
        w2 = rng.uniform(-b2, b2, size=(hidden, channels))
        sk = rng.normal(0.0, np.sqrt(2.0 / (kernel * kernel)), size=(1, 2, kernel, kernel))
        p = f"{prefix}."
        return cls(
            reduction=reduction,
            mlp_w1=Parameter(w1.astype(dtype), p + "mlp.w1"),
            mlp_b1=Parameter(np.zeros(hidden, dtype), p + "mlp.b1", decay=False),
            mlp_w2=Parameter(w2.astype(dtype), p + "mlp.w2"),
            mlp_b2=Parameter(np.zeros(channels, dtype), p + "mlp.b2", decay=False),
            spatial_kernel=Parameter(sk.astype(dtype), p + "spatial.weight"),
            spatial_bias=Parameter(np.zeros(1, dtype), p + "spatial.bias", decay=False),
        )

    def parameters(self) -> list[Parameter]:
        return [self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2, self.spatial_kernel, self.spatial_bias]


def validate_cbam_shape(channels: int, reduction: int, kernel: int) -> None:
    if reduction < 1 or channels % reduction:
        raise ShapeError(f"reduction ratio r={reduction} must divide channels C={channels}")
    if kernel < 1 or kernel % 2 == 0:
        raise ShapeError(f"spatial kernel k={kernel} must be odd")


def _mlp(v: Tensor, p: CbamParams) -> Tensor:
    hidden = ops.relu(ops.linear(v, p.mlp_w1, p.mlp_b1))
    return ops.linear(hidden, p.mlp_w2, p.mlp_b2)


def _check(f: Tensor, p: CbamParams) -> None:
    if f.ndim != 4:
        raise ShapeError(f"CBAM expects NCHW feature maps, got {f.shape}")
    if f.shape[1] != p.channels:
        raise ShapeError(f"feature map has C={f.shape[1]} channels, CBAM built for {p.channels}")


def channel_attention_weights(f: Tensor, p: CbamParams) -> Tensor:
    """sigmoid(MLP(avgpool(F)) + MLP(maxpool(F))) as an (N, C) tensor."""
    _check(f, p)
    n, c = f.shape[:2]
    avg = ops.pool_global_spatial(f, "avg").reshape(n, c)
    mx = ops.pool_global_spatial(f, "max").reshape(n, c)
    return ops.sigmoid(_mlp(avg, p) + _mlp(mx, p))


def spatial_attention_map(f: Tensor, p: CbamParams) -> Tensor:
    """sigmoid(conv_kxk([avg_c(F); max_c(F)])) as an (N, 1, H, W) tensor."""
    _check(f, p)
    pooled = ops.concat([ops.pool_across_channels(f, "avg"), ops.pool_across_channels(f, "max")], axis=1)
    pad = (p.kernel - 1) // 2
    return ops.sigmoid(ops.conv2d(pooled, p.spatial_kernel, p.spatial_bias, stride=1, padding=pad))


def cbam_forward(f: Tensor, p: CbamParams, return_maps: bool = False):
    """Refine ``f`` by channel weights, then by a spatial map computed from
    the channel-refined features. Shape is preserved.

    With ``return_maps`` also returns ``(channel_weights, spatial_map)``.
    """
    w = channel_attention_weights(f, p)
    n, c = w.shape
    refined = f * w.reshape(n, c, 1, 1)
    m = spatial_attention_map(refined, p)
    out = refined * m
    if return_maps:
        return out, w, m
    return out
