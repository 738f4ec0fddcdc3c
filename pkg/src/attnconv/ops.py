"""Differentiable forward operators over NCHW tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, check_finite, unbroadcast

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and grouped channels.

    ``weight`` has shape (Cout, Cin/groups, Kh, Kw). ``groups == Cin`` is a
    depthwise convolution.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if sh < 1 or sw < 1:
        raise ShapeError(f"stride must be positive, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ShapeError(f"padding must be non-negative, got {(ph, pw)}")
    if groups < 1 or cin % groups:
        raise ShapeError(f"input channels Cin={cin} not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"output channels Cout={cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"weight in-channels {cg} != Cin/groups = {cin // groups}")
    hout = conv_output_size(h, kh, sh, ph)
    wout = conv_output_size(w, kw, sw, pw)
    if hout < 1:
        raise ShapeError(f"output height H={hout} < 1 (H={h}, Kh={kh}, pad={ph}, stride={sh})")
    if wout < 1:
        raise ShapeError(f"output width W={wout} < 1 (W={w}, Kw={kw}, pad={pw}, stride={sw})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != (Cout,) = ({cout},)")
    check_finite(x.data, "conv2d input")

    g, og = groups, cout // groups
    xd, wd = x.data, weight.data
    if cg == 1 and og == 1:
        return _depthwise(x, weight, bias, sh, sw, ph, pw, hout, wout)
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0 and g == 1:
        return _pointwise(x, weight, bias)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :hout, :wout]
    k = cg * kh * kw
    cols = (
        win.reshape(n, g, cg, hout, wout, kh, kw)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(g, n * hout * wout, k)
    )
    wmat = wd.reshape(g, og, k).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)
    out = out.reshape(g, n, hout, wout, og).transpose(1, 0, 4, 2, 3).reshape(n, cout, hout, wout)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(gout):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        gmat = gout.reshape(n, g, og, hout, wout).transpose(1, 0, 3, 4, 2).reshape(g, n * hout * wout, og)
        if weight.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), gmat).transpose(0, 2, 1).reshape(cout, cg, kh, kw)
        if x.requires_grad:
            dwin = (
                np.matmul(gmat, wd.reshape(g, og, k))
                .reshape(g, n, hout, wout, cg, kh, kw)
                .transpose(1, 0, 4, 2, 3, 5, 6)
            ).reshape(n, cin, hout, wout, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, _taps(i, sh, hout), _taps(j, sw, wout)] += dwin[..., i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    return _finish(out, x, weight, bias, backward)


def _taps(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _finish(out, x, weight, bias, backward):
    if bias is None:
        return Tensor._make(out, (x, weight), lambda g: backward(g)[:2], "conv2d")
    return Tensor._make(out, (x, weight, bias), backward, "conv2d")


def _depthwise(x, weight, bias, sh, sw, ph, pw, hout, wout):
    # one output channel per input channel: accumulate kernel taps directly
    xd, wd = x.data, weight.data[:, 0]
    n, c, h, w = xd.shape
    kh, kw = wd.shape[1:]
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    out = np.zeros((n, c, hout, wout), dtype=xd.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, :, _taps(i, sh, hout), _taps(j, sw, wout)], wd[:, i, j].reshape(1, c, 1, 1), out=tmp)
            out += tmp
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    def backward(gout):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        if weight.requires_grad:
            gw = np.empty((c, 1, kh, kw), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap = xp[:, :, _taps(i, sh, hout), _taps(j, sw, wout)]
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", tap, gout)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            tmp = np.empty_like(gout)
            for i in range(kh):
                for j in range(kw):
                    np.multiply(gout, wd[:, i, j].reshape(1, c, 1, 1), out=tmp)
                    gxp[:, :, _taps(i, sh, hout), _taps(j, sw, wout)] += tmp
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    return _finish(out, x, weight, bias, backward)


def _pointwise(x, weight, bias):
    xd = x.data
    n, cin, h, w = xd.shape
    cout = weight.shape[0]
    wmat = weight.data.reshape(cout, cin)
    rows = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = rows @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))

    def backward(gout):
        gx = gw = gb = None
        grows = gout.transpose(0, 2, 3, 1).reshape(-1, cout)
        if bias is not None and bias.requires_grad:
            gb = grows.sum(axis=0)
        if weight.requires_grad:
            gw = (grows.T @ rows).reshape(weight.shape)
        if x.requires_grad:
            gx = np.ascontiguousarray((grows @ wmat).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        return gx, gw, gb

    return _finish(out, x, weight, bias, backward)


def pool_global_spatial(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-channel mean or max over all spatial positions -> (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if mode == "avg":
        return x.mean(axis=(2, 3), keepdims=True)
    if mode != "max":
        raise ValueError(f"unknown pooling mode {mode!r}")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(n, c, h, w),)

    return Tensor._make(out, (x,), backward, "global_max")


def pool_across_channels(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-position mean or max over channels -> (N, 1, H, W)."""
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if mode == "avg":
        return x.mean(axis=1, keepdims=True)
    if mode != "max":
        raise ValueError(f"unknown pooling mode {mode!r}")
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return Tensor._make(out, (x,), backward, "channel_max")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    xd = x.data
    return Tensor._make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"sigmoid": sigmoid, "relu": relu, "silu": silu}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


@dataclass
class RunningStats:
    """Batch-norm running mean/variance owned by a layer, not by autodiff."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> RunningStats:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    stats: RunningStats | None,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization followed by an affine map.

    In training mode the running statistics move toward the batch mean and
    the unbiased batch variance: ``new = (1 - momentum) * old + momentum * batch``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    xd = x.data
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("training-mode batch_norm needs N*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if stats is not None and update_stats:
            unbiased = var * (m / (m - 1))
            if not stats.initialized:
                stats.mean, stats.var = mu.copy(), unbiased.copy()
            else:
                stats.mean = ((1 - momentum) * stats.mean + momentum * mu).astype(xd.dtype)
                stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(xd.dtype)
    else:
        if stats is None or not stats.initialized:
            raise ValueError("eval-mode batch_norm needs initialized running statistics")
        mu, var = stats.mean, stats.var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    gamma = scale.data.reshape(1, c, 1, 1)
    out = xhat * gamma + shift.data.reshape(1, c, 1, 1)

    def backward(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if training:
            m = n * h * w
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv.reshape(1, c, 1, 1)
        return gx, gscale, gshift

    return Tensor._make(out, (x, scale, shift), backward, "batch_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight laid out as (D, K)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim D={x.shape[1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ShapeError("cross-entropy needs K >= 2 classes")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels[(labels < 0) | (labels >= k)][0]}")
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def scale_channels(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply (N, C, H, W) by per-(n, c) weights of shape (N, C)."""
    n, c = weights.shape
    return x * weights.reshape(n, c, 1, 1)


__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "RunningStats",
    "activation",
    "batch_norm",
    "concat",
    "conv2d",
    "conv_output_size",
    "linear",
    "log_softmax",
    "pool_across_channels",
    "pool_global_spatial",
    "relu",
    "scale_channels",
    "sigmoid",
    "silu",
    "softmax",
    "softmax_cross_entropy",
    "unbroadcast",
]
