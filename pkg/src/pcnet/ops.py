"""Differentiable operations over :class:`~pcnet.tensor.Tensor`.

Each op computes its forward value with numpy and, when a tape is active and
an input requires a gradient, records a closure mapping the output gradient
to per-input gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pcnet.tensor import DimensionError, Tensor, current_tape

LOG_CLAMP = 1e-12


class ConfigurationError(ValueError):
    """An op was configured with parameters it cannot honour."""


def _emit(data: np.ndarray, inputs, backward) -> Tensor:
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation, ``[B,C,H,W] * [C',C,kh,kw] -> [B,C',H',W']``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4D input and kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    B, C, H, W = x.shape
    Co, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = kernel.data.reshape(Co, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)

    def backward(g):
        go = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        dk = (go.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (go @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pad:pad + H, pad:pad + W]
        return dx, dk

    return _emit(out, (x, kernel), backward)


def conv1d_channels(v: Tensor, kernel: Tensor) -> Tensor:
    """Same-length 1D convolution across the channel axis (last axis) without bias.

    ``out[..., c] = sum_j kernel[j] * v_padded[..., c + j]`` with ``(k - 1) / 2``
    zeros on both ends.
    """
    if kernel.ndim != 1:
        raise DimensionError(f"conv1d_channels kernel must be 1D, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_channels needs an odd kernel size, got {k}")
    half = (k - 1) // 2
    C = v.shape[-1]
    pad_width = [(0, 0)] * (v.ndim - 1) + [(half, half)]
    vp = np.pad(v.data, pad_width)
    kd = kernel.data
    out = np.zeros_like(v.data)
    for j in range(k):
        out += kd[j] * vp[..., j:j + C]

    def backward(g):
        dv = dk = None
        if kernel.requires_grad:
            dk = np.array([np.sum(g * vp[..., j:j + C]) for j in range(k)], dtype=g.dtype)
        if v.requires_grad:
            dvp = np.zeros_like(vp)
            for j in range(k):
                dvp[..., j:j + C] += kd[j] * g
            dv = dvp[..., half:half + C]
        return dv, dk

    return _emit(out, (v, kernel), backward)


def global_average_pool(f: Tensor) -> Tensor:
    """Spatial mean per channel, ``[B,C,H,W] -> [B,C]``."""
    if f.ndim != 4:
        raise DimensionError(f"global_average_pool expects [B,C,H,W], got {f.shape}")
    H, W = f.shape[2], f.shape[3]
    if H * W < 1:
        raise DimensionError("global_average_pool needs a non-empty spatial extent")
    out = f.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), f.shape).copy(),)

    return _emit(out, (f,), backward)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape ``[B,D]`` or ``[D]``."""
    if W.ndim != 2 or b.ndim != 1 or x.ndim not in (1, 2):
        raise DimensionError(f"affine: bad ranks x{x.shape} W{W.shape} b{b.shape}")
    if x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise DimensionError(f"affine: x{x.shape} W{W.shape} b{b.shape} do not agree")
    out = x.data @ W.data.T + b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        dx = (g @ W.data) if x.requires_grad else None
        dW = (g2.T @ x2) if W.requires_grad else None
        db = g2.sum(axis=0) if b.requires_grad else None
        return dx, dW, db

    return _emit(out, (x, W, b), backward)


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    if z.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _emit(s, (z,), backward)


def sigmoid(z: Tensor) -> Tensor:
    x = z.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (z,), backward)


def relu(z: Tensor) -> Tensor:
    mask = z.data > 0
    out = np.where(mask, z.data, 0).astype(z.dtype)

    def backward(g):
        return (g * mask,)

    return _emit(out, (z,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1; ``a`` occupies the leading channels."""
    if a.ndim != b.ndim or a.ndim < 2 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: incompatible {a.shape} and {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :c1], g[:, c1:]

    return _emit(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        return g, g

    return _emit(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(g):
        return g, -g

    return _emit(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def backward(g):
        return g * b.data, g * a.data

    return _emit(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        return (g * s,)

    return _emit(a.data * a.dtype.type(s), (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def backward(g):
        return (g,)

    return _emit(a.data + a.dtype.type(s), (a,), backward)


def channel_scale(f: Tensor, a: Tensor) -> Tensor:
    """Rescale each channel: ``out[b,c,i,j] = a[b,c] * f[b,c,i,j]``."""
    if f.ndim != 4 or a.shape != f.shape[:2]:
        raise DimensionError(f"channel_scale: weights {a.shape} do not match feature map {f.shape}")
    w = a.data[:, :, None, None]

    def backward(g):
        df = g * w if f.requires_grad else None
        da = np.sum(g * f.data, axis=(2, 3)) if a.requires_grad else None
        return df, da

    return _emit(f.data * w, (f, a), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather along axis 0; repeated indices accumulate their gradients."""
    idx = np.asarray(index, dtype=np.intp)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _emit(x.data[idx], (x,), backward)


def pick(q: Tensor, index) -> Tensor:
    """Per-row element selection, ``out[b] = q[b, index[b]]``."""
    idx = np.asarray(index, dtype=np.intp)
    if q.ndim != 2 or idx.shape != (q.shape[0],):
        raise DimensionError(f"pick: scores {q.shape} and index {idx.shape} disagree")
    if np.any(idx < 0) or np.any(idx >= q.shape[1]):
        raise IndexError(f"pick: class index out of range [0, {q.shape[1]})")
    rows = np.arange(q.shape[0])

    def backward(g):
        dq = np.zeros_like(q.data)
        dq[rows, idx] = g
        return (dq,)

    return _emit(q.data[rows, idx], (q,), backward)


def log(x: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log with the argument clamped below at ``clamp``."""
    live = x.data > clamp
    out = np.log(np.maximum(x.data, x.dtype.type(clamp)))

    def backward(g):
        return (np.where(live, g / np.where(live, x.data, 1), 0).astype(x.dtype),)

    return _emit(out, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def sum_rows(x: Tensor) -> Tensor:
    """Sum over axis 1 of a 2D tensor, ``[B,N] -> [B]``."""
    def backward(g):
        return (np.broadcast_to(g[:, None], x.shape).copy(),)

    return _emit(x.data.sum(axis=1), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit(x.data.reshape(shape), (x,), backward)
