"""Differentiable primitives.

Every function takes and returns :class:`~leukonet.tensor.Tensor` and
registers a backward rule on the active tape when gradients are needed.
Layouts are NCHW throughout.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import conv as _conv
from .tensor import ConfigurationError, DimensionError, Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.array(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.broadcast_to(np.reshape(g, ()) / n, x.shape).copy(),)

    return record("mean", np.array(x.data.mean()), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return record("reshape", x.data.reshape(shape), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        return (g * mask,)

    return record("relu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return record("sigmoid", s, (x,), backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    method: str = "im2col",
) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``weight`` has shape ``[Cout, Cin // groups, kh, kw]``; output channel
    block ``g`` only reads input channel block ``g``.
    """
    out, cols = _conv.conv2d_forward(x.data, weight.data, stride, padding, groups, method)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
        out += bias.data[None, :, None, None]

    def backward(g):
        c = cols if cols is not None else _conv.columns(x.data, weight.shape, stride, padding, groups)
        gx, gw = _conv.conv2d_backward(g, x.shape, weight.data, c, stride, padding, groups)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    are updated in place as ``running = momentum * running + (1 - momentum) * batch``
    (the running variance uses the unbiased batch estimate).
    """
    if eps <= 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d input must be 4-D, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}")
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        if m < 2:
            raise DimensionError(f"batch_norm2d in train mode needs N*H*W >= 2, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / (m - 1))
    else:
        mu = running_mean.copy()
        var = running_var.copy()
        centered = x.data - mu[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (dxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None, None]
        else:
            gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return record("batch_norm2d", out, (x, gamma, beta), backward)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every spatial position of channel ``c`` of item ``n`` by ``s[n, c]``."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise DimensionError(f"scale_channels: scales {s.shape} do not match input {x.shape}")
    out = x.data * s.data[:, :, None, None]

    def backward(g):
        return g * s.data[:, :, None, None], (g * x.data).sum(axis=(2, 3))

    return record("scale_channels", out, (x, s), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool input must be 4-D, got shape {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape ``[out, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, backward)


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling without padding; gradient routes to the first maximum."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"pool kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * hit
        return (gx,)

    return record("max_pool2d", out, (x,), backward)


__all__ = [
    "add",
    "mul",
    "sum",
    "mean",
    "reshape",
    "relu",
    "sigmoid",
    "conv2d",
    "batch_norm2d",
    "scale_channels",
    "global_avg_pool",
    "linear",
    "max_pool2d",
]
