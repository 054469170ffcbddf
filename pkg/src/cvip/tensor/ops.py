"""Differentiable operations. Every op returns a new Tensor and records a closure
mapping the output gradient to one gradient per parent (``None`` = no grad)."""
from __future__ import annotations

import itertools
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InputError
from .engine import Tensor, as_tensor

IntOrTuple = Union[int, Sequence[int]]


def _tuple(v: IntOrTuple, n: int) -> Tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise InputError(f"expected {n} values, got {v}")
    return v


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _scalar_or_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_or_tensor(b, a)
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _scalar_or_tensor(a, b)
    b = _scalar_or_tensor(b, a)
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_or_tensor(b, a)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_or_tensor(b, a)
    out = a.data / b.data
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# --- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[i, index[i]]`` for a 2D tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def back(g):
        out = np.zeros_like(x.data)
        out[rows, index] = g
        return (out,)

    return Tensor._from_op(x.data[rows, index], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis), tuple(tensors), back)


# --- softmax family ---------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._from_op(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = shifted / shifted.sum(axis=axis, keepdims=True)
    return Tensor._from_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


# --- linear layers ----------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise InputError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, back)


def pad(x: Tensor, widths: Sequence[Tuple[int, int]], mode: str = "constant") -> Tensor:
    """Pad every axis by ``widths[i]``; ``mode`` is 'constant' (zeros) or 'edge'."""
    if mode not in ("constant", "edge"):
        raise InputError(f"unknown pad mode {mode}")
    widths = [tuple(w) for w in widths]
    if not any(a or b for a, b in widths):
        return x
    out = np.pad(x.data, widths, mode=mode)

    def back(g):
        if mode == "constant":
            core = tuple(slice(a, g.shape[i] - b) for i, (a, b) in enumerate(widths))
            return (g[core].copy(),)
        # each padded sample reads from the clamped source index
        for axis, (a, b) in enumerate(widths):
            if not (a or b):
                continue
            n = x.shape[axis]
            src = np.clip(np.arange(g.shape[axis]) - a, 0, n - 1)
            moved = np.moveaxis(g, axis, 0)
            acc = np.zeros((n,) + moved.shape[1:], dtype=g.dtype)
            np.add.at(acc, src, moved)
            g = np.moveaxis(acc, 0, axis)
        return (np.ascontiguousarray(g),)

    return Tensor._from_op(out, (x,), back)


def _out_size(n, k, s):
    if n < k:
        raise InputError(f"window {k} larger than padded extent {n}")
    return (n - k) // s + 1


def conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
         stride: IntOrTuple = 1, padding: IntOrTuple = 0) -> Tensor:
    """N-d cross-correlation. ``x``: (N, C, *S), ``weight``: (O, C, *K), zero padding."""
    nd = weight.ndim - 2
    if x.ndim != nd + 2:
        raise InputError(f"conv{nd}d expects a {nd + 2}-d input, got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise InputError(f"conv: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    ksize = weight.shape[2:]
    if min(stride) < 1 or min(padding) < 0:
        raise InputError("stride must be >= 1 and padding >= 0")
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x.data
    spatial = tuple(range(2, 2 + nd))
    osize = tuple(_out_size(xp.shape[2 + i], ksize[i], stride[i]) for i in range(nd))

    def windows():
        v = sliding_window_view(xp, ksize, axis=spatial)
        sl = (slice(None), slice(None)) + tuple(
            slice(0, (osize[i] - 1) * stride[i] + 1, stride[i]) for i in range(nd)
        )
        return v[sl]  # (N, C, *O, *K)

    kaxes = tuple(range(2 + nd, 2 + 2 * nd))
    cols = windows()
    out = np.tensordot(cols, weight.data, axes=((1,) + kaxes, (1,) + tuple(range(2, 2 + nd))))
    out = np.moveaxis(out, -1, 1)  # (N, O, *osize)
    if bias is not None:
        out = out + bias.data.reshape((1, -1) + (1,) * nd)
    out = np.ascontiguousarray(out)

    def back(g):
        gaxes = (0,) + tuple(range(2, 2 + nd))
        gb = g.sum(axis=gaxes) if bias is not None else None
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows(), axes=(gaxes, (0,) + tuple(range(2, 2 + nd))))
        gx = None
        if x.requires_grad:
            # (C, *K, N, *O)
            gcols = np.tensordot(weight.data, g, axes=((0,), (1,)))
            gxp = np.zeros((xp.shape[1], xp.shape[0]) + xp.shape[2:], dtype=g.dtype)
            for k in itertools.product(*(range(n) for n in ksize)):
                sl = (slice(None), slice(None)) + tuple(
                    slice(k[i], k[i] + (osize[i] - 1) * stride[i] + 1, stride[i]) for i in range(nd)
                )
                gxp[sl] += gcols[(slice(None),) + k]
            gxp = np.swapaxes(gxp, 0, 1)
            core = (slice(None), slice(None)) + tuple(
                slice(p, xp.shape[2 + i] - p) for i, p in enumerate(padding)
            )
            gx = np.ascontiguousarray(gxp[core])
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, back)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if weight.ndim != 4:
        raise InputError("conv2d expects a 4-d weight")
    return conv(x, weight, bias, stride, padding)


def conv3d(x, weight, bias=None, stride=1, padding=0, temporal_padding: str = "zeros"):
    """3-d convolution over (N, C, T, H, W); ``temporal_padding`` 'zeros' or 'replicate'."""
    if weight.ndim != 5:
        raise InputError("conv3d expects a 5-d weight")
    padding = _tuple(padding, 3)
    if temporal_padding == "replicate" and padding[0]:
        x = pad(x, [(0, 0), (0, 0), (padding[0], padding[0]), (0, 0), (0, 0)], mode="edge")
        padding = (0,) + padding[1:]
    elif temporal_padding not in ("zeros", "replicate"):
        raise InputError(f"unknown temporal padding {temporal_padding}")
    return conv(x, weight, bias, stride, padding)


def max_pool(x: Tensor, kernel: IntOrTuple, stride: Optional[IntOrTuple] = None,
             padding: IntOrTuple = 0) -> Tensor:
    """Max pooling over all axes after the first two (2-d or 3-d)."""
    nd = x.ndim - 2
    kernel = _tuple(kernel, nd)
    stride = kernel if stride is None else _tuple(stride, nd)
    padding = _tuple(padding, nd)
    if any(p * 2 >= k + 1 and p > 0 for p, k in zip(padding, kernel)):
        raise InputError("pool padding must be at most half the kernel")
    xp = x.data
    if any(padding):
        xp = np.pad(xp, [(0, 0), (0, 0)] + [(p, p) for p in padding], constant_values=-np.inf)
    spatial = tuple(range(2, 2 + nd))
    osize = tuple(_out_size(xp.shape[2 + i], kernel[i], stride[i]) for i in range(nd))
    v = sliding_window_view(xp, kernel, axis=spatial)
    v = v[(slice(None), slice(None)) + tuple(
        slice(0, (osize[i] - 1) * stride[i] + 1, stride[i]) for i in range(nd))]
    flat = v.reshape(v.shape[: 2 + nd] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for j, k in enumerate(itertools.product(*(range(n) for n in kernel))):
            sl = (slice(None), slice(None)) + tuple(
                slice(k[i], k[i] + (osize[i] - 1) * stride[i] + 1, stride[i]) for i in range(nd)
            )
            gxp[sl] += np.where(arg == j, g, 0)
        core = (slice(None), slice(None)) + tuple(
            slice(p, xp.shape[2 + i] - p) for i, p in enumerate(padding))
        return (gxp[core],)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis after (N, C)."""
    return mean(x, axis=tuple(range(2, x.ndim)))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel (axis 1) normalisation; running stats are updated in place when training.

    ``running = momentum * running + (1 - momentum) * batch`` with the unbiased
    batch variance.
    """
    if x.shape[1] != gamma.shape[0]:
        raise InputError(f"batch_norm: {x.shape[1]} channels, parameters for {gamma.shape[0]}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    g_ = gamma.data.reshape(bshape)
    if training:
        m = int(np.prod([x.shape[a] for a in axes]))
        if m < 2:
            raise InputError("batch_norm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(-1)
        running_var *= momentum
        running_var += (1 - momentum) * var.reshape(-1) * (m / (m - 1))
        out = xhat * g_ + beta.data.reshape(bshape)

        def back(g):
            gg = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            dxhat = g * g_
            gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, gg, gbeta
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * inv
        out = xhat * g_ + beta.data.reshape(bshape)

        def back(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), back)
