"""Raw ndarray kernels for grouped 2-D convolution (NCHW).

Two forward paths are provided. ``im2col`` unfolds the padded input into a
column matrix per group and does one batched matmul; ``direct`` accumulates
shifted input slices tap by tap. They agree to rounding and the im2col path
is the default.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigurationError, DimensionError


def output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def check_conv_args(x_shape, w_shape, stride: int, padding: int, groups: int) -> Tuple[int, int]:
    if len(x_shape) != 4:
        raise DimensionError(f"conv2d input must be 4-D [N,C,H,W], got shape {tuple(x_shape)}")
    if len(w_shape) != 4:
        raise DimensionError(f"conv2d weight must be 4-D [Cout,Cin/g,kh,kw], got shape {tuple(w_shape)}")
    if groups < 1:
        raise ConfigurationError(f"groups must be >= 1, got {groups}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    n, cin, h, w = x_shape
    cout, cin_g, kh, kw = w_shape
    if cin % groups or cout % groups:
        raise ConfigurationError(f"groups={groups} must divide in_channels={cin} and out_channels={cout}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight expects {cin_g} input channels per group but input has {cin} channels / {groups} groups"
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    return output_size(h, kh, stride, padding), output_size(w, kw, stride, padding)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int, groups: int) -> np.ndarray:
    # -> [g, cin_g*kh*kw, N*ho*wo]
    n, cin = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, groups, cin // groups, ho, wo, kh, kw)
    cols = win.transpose(1, 2, 5, 6, 0, 3, 4)
    return np.ascontiguousarray(cols).reshape(groups, (cin // groups) * kh * kw, n * ho * wo)


def conv2d_forward(x, w, stride=1, padding=0, groups=1, method="im2col"):
    """Return ``(out, cache)``; bias is handled by the caller."""
    ho, wo = check_conv_args(x.shape, w.shape, stride, padding, groups)
    n, cin = x.shape[:2]
    cout, cin_g, kh, kw = w.shape
    og = cout // groups

    if method == "direct":
        xp = _pad(x, padding)
        out = np.zeros((n, cout, ho, wo))
        for g in range(groups):
            xs = xp[:, g * cin_g:(g + 1) * cin_g]
            wg = w[g * og:(g + 1) * og]
            acc = out[:, g * og:(g + 1) * og]
            for i in range(kh):
                for j in range(kw):
                    patch = xs[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                    acc += np.einsum("nchw,oc->nohw", patch, wg[:, :, i, j])
        return out, None
    if method != "im2col":
        raise ConfigurationError(f"unknown conv method {method!r}")

    cols = columns(x, w.shape, stride, padding, groups)
    wmat = w.reshape(groups, og, cin_g * kh * kw)
    out = np.matmul(wmat, cols)  # [g, og, N*ho*wo]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d_backward(grad_out, x_shape, w, cols, stride, padding, groups):
    """Gradients w.r.t. input and weight given the forward column cache."""
    n, cin, h, wd = x_shape
    cout, cin_g, kh, kw = w.shape
    og = cout // groups
    ho, wo = grad_out.shape[2:]
    g_mat = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(groups, og, n * ho * wo)
    wmat = w.reshape(groups, og, cin_g * kh * kw)

    grad_w = np.matmul(g_mat, cols.transpose(0, 2, 1)).reshape(w.shape)
    dcols = np.matmul(wmat.transpose(0, 2, 1), g_mat)  # [g, cin_g*kh*kw, N*ho*wo]

    if kh == 1 and kw == 1 and padding == 0:
        d = dcols.reshape(groups, cin_g, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, cin, ho, wo)
        if stride == 1:
            return np.ascontiguousarray(d), grad_w
        grad_x = np.zeros(x_shape)
        grad_x[:, :, ::stride, ::stride][:, :, :ho, :wo] = d
        return grad_x, grad_w

    d = dcols.reshape(groups, cin_g, kh, kw, n, ho, wo).transpose(4, 0, 1, 2, 3, 5, 6).reshape(n, cin, kh, kw, ho, wo)
    gxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += d[:, :, i, j]
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp), grad_w


def columns(x, w_shape, stride, padding, groups):
    """Column matrix the backward pass needs; rebuilt when forward ran ``direct``."""
    _, _, kh, kw = w_shape
    ho, wo = check_conv_args(x.shape, w_shape, stride, padding, groups)
    n, cin = x.shape[:2]
    if kh == 1 and kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        return np.ascontiguousarray(xs.reshape(n, groups, cin // groups, ho * wo).transpose(1, 2, 0, 3)).reshape(
            groups, cin // groups, n * ho * wo
        )
    return _im2col(_pad(x, padding), kh, kw, stride, ho, wo, groups)
