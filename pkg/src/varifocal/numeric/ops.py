"""Differentiable operations on :class:`Tensor`.

Image tensors are channel-first: ``C×H×W`` for a single image or ``N×C×H×W``
for a batch.  Every op validates shapes, rejects non-finite results, and only
records graph state when some input requires a gradient.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import NumericError, Tensor, as_tensor, make_result


class ShapeError(NumericError, ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "mul")


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return make_result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a) -> Tensor:
    """Flatten all but the leading (batch) axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward, "concat")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# layers


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.  ``x`` is ``C×H×W`` or ``N×C×H×W``."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    single = x.ndim == 3
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W or N×C×H×W input and 4-D weight, got {x.shape}, {weight.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c:
        raise ShapeError(f"weight expects {c_in} input channels, input has {c}")
    if k != k2 or k < 1:
        raise ShapeError(f"square kernel required, got {k}×{k2}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}×{w + 2 * pad}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, oh, ow), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
    cols2 = cols.reshape(c * k * k, n * oh * ow)
    w2 = weight.data.reshape(c_out, -1)
    y = w2 @ cols2
    if bias is not None:
        y += bias.data[:, None]
    out = np.ascontiguousarray(y.reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3))
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(c_out, -1)
        dw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, n, oh, ow)
            dxt = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxt[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3)[:, :, pad:pad + h, pad:pad + w])
            if single:
                dx = dx[0]
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "conv2d")


def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over ``N×C×H×W``.

    In training mode batch statistics are used and, when given, the running
    buffers are updated in place by an exponential moving average (unbiased
    variance).  Eval mode requires populated running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("batch norm epsilon must be positive")
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    m = n * h * w
    bshape = (1, c, 1, 1)

    if training:
        if m < 2:
            raise ShapeError("training-mode batch norm needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        if running_mean is None or running_var is None:
            raise NumericError("eval-mode batch norm needs populated running statistics")
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
                dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm2d")


def max_pool2d(x, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling; gradient goes to the first maximal cell in scan order."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"max_pool2d expects C×H×W or N×C×H×W, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"pool kernel {kernel} larger than input {h}×{w}")
    if kernel < 1 or stride < 1:
        raise ShapeError("kernel and stride must be positive")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1

    if kernel == stride:
        cropped = xd[:, :, :oh * kernel, :ow * kernel]
        win = cropped.reshape(n, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, kernel * kernel)
    else:
        view = np.lib.stride_tricks.sliding_window_view(xd, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        win = view.reshape(n, c, oh, ow, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        if kernel == stride:
            gw = np.zeros((n, c, oh, ow, kernel * kernel), dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g4[..., None], axis=-1)
            dx = np.zeros_like(xd)
            dx[:, :, :oh * kernel, :ow * kernel] = (
                gw.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * kernel, ow * kernel)
            )
        else:
            rows = np.arange(oh)[:, None] * stride + idx // kernel
            cols = np.arange(ow)[None, :] * stride + idx % kernel
            dx = np.zeros_like(xd)
            ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            np.add.at(dx, (ni[:, :, None, None], ci[:, :, None, None], rows, cols), g4)
        return (dx[0] if single else dx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def fully_connected(x, weight, bias=None) -> Tensor:
    """``y = W·x + b`` for a vector ``x`` or a batch of row vectors."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dx = g @ weight.data if x.requires_grad else None
        if weight.requires_grad:
            dw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        else:
            dw = None
        if bias is None:
            return dx, dw
        db = g if g.ndim == 1 else g.sum(axis=0)
        return dx, dw, db

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "fully_connected")


linear = fully_connected


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)
    return make_result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def cross_entropy(logits, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``N×K`` logits against integer class targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != t.shape[0]:
        raise ShapeError(f"logits {logits.shape} incompatible with {t.shape[0]} targets")
    n, k = logits.shape
    if n == 0:
        raise ShapeError("cross entropy of an empty batch")
    if t.min() < 0 or t.max() >= k:
        raise ValueError(f"target out of range [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(n), t]
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(nll.sum() * scale, dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        return (d * (g * scale),)

    return make_result(out, (logits,), backward, "cross_entropy")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of the last two axes."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}×{out_w}")
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"bilinear_resize needs at least 2 spatial axes, got {x.shape}")
    h, w = x.shape[-2:]
    my = _interp_matrix(h, out_h, x.dtype)
    mx = _interp_matrix(w, out_w, x.dtype)
    out = my @ x.data @ mx.T
    return make_result(out, (x,), lambda g: (my.T @ g @ mx,), "bilinear_resize")


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable bilinear resize for preprocessing."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    return _interp_matrix(h, out_h, dtype) @ arr.astype(dtype) @ _interp_matrix(w, out_w, dtype).T
