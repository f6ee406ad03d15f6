"""Differentiable operations used by the NWS networks."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InvalidInputError
from .tensor import Tensor


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with ``[out, in, k, k]`` kernels, no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    if c != c_in:
        raise DimensionError(f"input channel axis (1) is {c} but kernel in axis (1) is {c_in}")
    if kh != kw:
        raise DimensionError(f"kernel spatial axes (2, 3) differ: {kh} vs {kw}")
    if stride < 1 or padding < 0:
        raise InvalidInputError(f"bad stride={stride} / padding={padding}")
    k = kh
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} larger than padded input {h}x{wd}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (n, c, ho, wo, k, k) view, no copy
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, c_out)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    wdata = w.data

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # (c_out, c, k, k)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gt = g.transpose(0, 2, 3, 1)  # (n, ho, wo, c_out)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(gt, wdata[:, :, i, j], axes=([3], [0]))  # (n, ho, wo, c)
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return Tensor.make(out, (x, w), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def avg_pool2d(x: Tensor, kernel_size: int, stride: int | None = None) -> Tensor:
    """Non-overlapping or strided average pooling on NCHW input, no padding."""
    stride = kernel_size if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kernel_size, stride, 0), _conv_out(w, kernel_size, stride, 0)
    if ho < 1 or wo < 1:
        raise DimensionError(f"pool size {kernel_size} larger than input {h}x{w}")
    windows = sliding_window_view(x.data, (kernel_size, kernel_size), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = windows.mean(axis=(4, 5)).astype(x.dtype)
    scale = x.dtype.type(1.0 / (kernel_size * kernel_size))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(kernel_size):
            for j in range(kernel_size):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * scale
        return (gx,)

    return Tensor.make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over H and W, keeping a 1x1 spatial map."""
    return x.mean(axis=(2, 3), keepdims=True)


def batch_norm(x: Tensor, state, training: bool) -> Tensor:
    """Per-channel batch normalisation of NCHW input against a ``BatchNormState``.

    In training mode batch statistics are used and the running averages are
    updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if c != state.channels:
        raise DimensionError(f"input channel axis (1) is {c}, state has {state.channels} channels")
    gamma, beta = state.gamma, state.beta
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    dt = x.dtype.type
    eps = dt(state.eps)

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 0:
            raise InvalidInputError("batch_norm got an empty batch in training mode")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = centered * inv_std.reshape(shape)
        mom = dt(state.momentum)
        unbiased = var * dt(m / (m - 1)) if m > 1 else var
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
        xhat = (x.data - state.running_mean.reshape(shape)) * inv_std.reshape(shape)

    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        g_gamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        g_beta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                mean_g = gxhat.mean(axis=axes, keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(shape)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, g_gamma, g_beta

    return Tensor.make(out.astype(x.dtype), (x, gamma, beta), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, V], got {logits.shape}")
    labels = np.asarray(labels)
    n, v = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch axis (0) of size {n}")
    if n == 0:
        raise InvalidInputError("empty batch")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= v:
        raise InvalidInputError(f"labels must be integers in [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (log_norm - z[rows, labels]).mean()

    def backward(g):
        grad = softmax(logits.data)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return Tensor.make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def straight_through(source: Tensor, values: np.ndarray) -> Tensor:
    """Forward ``values``; backward copies the incoming gradient to ``source`` unchanged."""
    if values.shape != source.shape:
        raise DimensionError(f"straight-through values {values.shape} vs source {source.shape}")
    return Tensor.make(np.asarray(values, dtype=source.dtype), (source,), lambda g: (g,))


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` along axis 0; backward scatter-adds into the selected rows."""
    index = np.asarray(index)
    rows = table.shape[0]

    def backward(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, index, g)
        return (gt,)

    if index.size and (index.min() < 0 or index.max() >= rows):
        raise InvalidInputError(f"gather index out of range [0, {rows})")
    return Tensor.make(table.data[index], (table,), backward)
