"""Differentiable operations on :class:`~embtrack.core.tensor.Tensor`.

Image tensors use the (batch, channels, height, width) layout.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.data.dtype)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    out = Tensor(a.data + b.data, dtype=a.data.dtype)
    sa, sb = a.shape, b.shape
    return record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    out = Tensor(a.data - b.data, dtype=a.data.dtype)
    sa, sb = a.shape, b.shape
    return record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    out = Tensor(a.data * b.data, dtype=a.data.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record(out, (a, b), bw, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(np.asarray(x.data.sum()), dtype=x.data.dtype)
    shape = x.shape
    return record(out, (x,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.mean()), dtype=x.data.dtype)
    shape = x.shape
    return record(out, (x,), lambda g: (np.broadcast_to(g / n, shape),), "mean")


def square(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(xd * xd, dtype=xd.dtype)
    return record(out, (x,), lambda g: (2.0 * xd * g,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0), dtype=x.data.dtype)
    return record(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split form avoids overflow in exp for large |x|
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    out = Tensor(y, dtype=xd.dtype)
    return record(out, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, dtype=x.data.dtype)
    return record(out, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_POINTWISE = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def pointwise(x: Tensor, fn: str) -> Tensor:
    try:
        return _POINTWISE[fn](x)
    except KeyError:
        raise ValueError(f"unknown pointwise function {fn!r}") from None


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"non-channel extents differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), dtype=a.data.dtype)
    return record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    out = Tensor(x.data[:, start:stop], dtype=x.data.dtype)
    return record(out, (x,), bw, "slice")


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    np_mode = {"zero": "constant", "reflect": "reflect"}[mode]
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=np_mode)


def _unpad(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad`."""
    if p == 0:
        return g
    if mode == "zero":
        return g[:, :, p:-p, p:-p]
    # reflect: fold border rows/cols back onto their sources
    g = g.copy()
    for k in range(1, p + 1):
        g[:, :, p + k, :] += g[:, :, p - k, :]
        g[:, :, -p - 1 - k, :] += g[:, :, -p - 1 + k, :]
    for k in range(1, p + 1):
        g[:, :, :, p + k] += g[:, :, :, p - k]
        g[:, :, :, -p - 1 - k] += g[:, :, :, -p - 1 + k]
    return g[:, :, p:-p, p:-p]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "zero") -> Tensor:
    """Same-size 2-d cross-correlation.

    ``padding`` is ``"zero"`` or ``"reflect"``; kernels must have odd extents.
    """
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ValueError(f"input has {C} channels but kernel expects {Ci}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd extent, got {kh}x{kw}")
    if padding not in ("zero", "reflect"):
        raise ValueError(f"unknown padding {padding!r}")
    p = kh // 2
    if padding == "reflect" and p >= min(H, W):
        raise ValueError("reflect padding wider than the image")
    wd = w.data
    w2 = wd.reshape(Co, -1)
    if kh == 1:
        cols = x.data.transpose(1, 0, 2, 3).reshape(C, -1)
    else:
        xp = _pad(x.data, p, padding)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,H,W,kh,kw
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * H * W)
    y = w2 @ cols
    if b is not None:
        y += b.data[:, None]
    out = Tensor(y.reshape(Co, B, H, W).transpose(1, 0, 2, 3), dtype=x.data.dtype)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(Co, -1)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gb = g2.sum(axis=1) if b is not None else None
        gcols = w2.T @ g2
        if kh == 1:
            gx = gcols.reshape(C, B, H, W).transpose(1, 0, 2, 3)
        else:
            gcols = gcols.reshape(C, kh, kw, B, H, W)
            gxp = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + H, j:j + W] += gcols[:, i, j]
            gx = _unpad(gxp.transpose(1, 0, 2, 3), p, padding)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first row-major index."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d needs even spatial extents, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y, dtype=x.data.dtype)

    def bw(g):
        gb = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return record(out, (x,), bw, "max_pool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    B, C, H, W = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)
    out = Tensor(y, dtype=x.data.dtype)
    return record(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),), "upsample2x")
