"""Differentiable operations on :class:`~noisedge.autograd.Tensor`.

Conventions, fixed here so the test oracles know what to expect:

* conv2d is cross-correlation (no kernel flip).
* bilinear_upsample uses the half-pixel (align-corners=false) mapping.
* maxpool routes the gradient to the first (row-major) maximum on ties.
* ReLU's subgradient at 0 is 0.
* softmax_rows normalizes along the last axis with max-subtraction.

Elementwise ops accept numpy-style broadcasting of singleton axes (the
channel-attention gates need (N,C,1,1) against (N,C,H,W)); any other shape
mismatch is rejected with a diagnostic.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, as_tensor, is_grad_enabled


def _record(data: np.ndarray, parents, backward) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents):
        return Tensor._from_op(data, parents, backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype.name} vs {b.dtype.name}; cast explicitly")


def _binary(a, b, op_name, forward, backward_pair):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _check_same_dtype(a, b, op_name)
    try:
        out = forward(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"{op_name}: incompatible shapes {a.shape} vs {b.shape}") from exc

    def grad_fn(g):
        ga, gb = backward_pair(g, a.data, b.data, out)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, da, db, out: (g, g))


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, da, db, out: (g, -g))


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", np.multiply, lambda g, da, db, out: (g * db, g * da))


def div(a, b) -> Tensor:
    return _binary(a, b, "div", np.divide,
                   lambda g, da, db, out: (g / db, -g * da / (db * db)))


def pow_const(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = x.data ** exponent

    def grad_fn(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _record(out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to stay overflow-free at either extreme.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    """Total sum as a (1,1,1,1) scalar tensor."""
    out = np.sum(x.data).reshape(1, 1, 1, 1)

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), grad_fn)


def mean_all(x: Tensor) -> Tensor:
    n = float(x.size)
    out = (np.sum(x.data) / n).reshape(1, 1, 1, 1)

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()) / n, x.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), grad_fn)


def swap_last_axes(x: Tensor) -> Tensor:
    out = np.ascontiguousarray(x.data.swapaxes(-1, -2))

    def grad_fn(g):
        return (g.swapaxes(-1, -2),)

    return _record(out, (x,), grad_fn)


def concat_channels(xs) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, inputs kept in order."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels: need at least one input")
    base = xs[0]
    for t in xs[1:]:
        _check_same_dtype(base, t, "concat_channels")
        if t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ValueError(f"concat_channels: N/H/W mismatch {base.shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return _record(out, tuple(xs), grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(f"slice_channels: bad range [{start}:{stop}] for C={x.shape[1]}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of NCHW input with (K, Cin/groups, kh, kw) kernels."""
    n, cin, h, wd = x.shape
    k, cg, kh, kw = w.shape
    _check_same_dtype(x, w, "conv2d")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if cin % groups or k % groups:
        raise ValueError(f"conv2d: channels (in={cin}, out={k}) not divisible by groups={groups}")
    if cg * groups != cin:
        raise ValueError(f"conv2d: input has {cin} channels but kernels expect {cg * groups} "
                         f"({cg} per group x {groups} groups)")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: output would be empty for input {h}x{wd}, "
                         f"kernel {kh}x{kw}, stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, OH, OW, C, kh, kw) -> (N, OH*OW, groups, Cg*kh*kw)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, oh * ow, groups, cg * kh * kw)
    wg = w.data.reshape(groups, k // groups, cg * kh * kw)

    pieces = [col[:, :, g] @ wg[g].T for g in range(groups)]   # each (N, OH*OW, Kg)
    out = np.concatenate(pieces, axis=2).reshape(n, oh, ow, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        _check_same_dtype(x, b, "conv2d")
        if b.shape != (k,):
            raise ValueError(f"conv2d: bias must have shape ({k},), got {b.shape}")
        out = out + b.data.reshape(1, k, 1, 1)

    def grad_fn(g):
        gk = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, groups, k // groups)
        gw = np.empty_like(w.data).reshape(groups, k // groups, cg * kh * kw)
        gcol = np.empty_like(col)
        for gi in range(groups):
            gw[gi] = np.einsum("nmk,nmd->kd", gk[:, :, gi], col[:, :, gi])
            gcol[:, :, gi] = gk[:, :, gi] @ wg[gi]
        gw = gw.reshape(w.shape)

        gwin = gcol.reshape(n, oh, ow, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.9,
                eps: float = 1e-5, update_running: bool | None = None) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with batch statistics (biased variance) and, unless
    ``update_running`` is forced off, folds them into the running buffers as
    ``running = momentum * running + (1 - momentum) * batch``. Eval mode uses
    the running buffers.
    """
    n, c, h, wd = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have shape ({c},), "
                         f"got {gamma.shape} and {beta.shape}")
    _check_same_dtype(x, gamma, "batchnorm2d")
    if update_running is None:
        update_running = training

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu.astype(running_mean.dtype)
            running_var *= momentum
            running_var += (1.0 - momentum) * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            m1 = gxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            m2 = (gxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (gxhat - m1 - xhat * m2) * inv_std.reshape(1, c, 1, 1)
        else:
            gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def maxpool2d(x: Tensor, k: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, wd = x.shape
    oh = _conv_out_extent(h, k, stride, padding)
    ow = _conv_out_extent(wd, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2d: output would be empty for input {h}x{wd}")
    fill = np.array(-np.inf, dtype=x.dtype)
    xp = np.full((n, c, h + 2 * padding, wd + 2 * padding), fill, dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = np.argmax(flat, axis=4)          # first index wins ties (row-major)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        io, jo = np.divmod(arg, k)
        rows = np.arange(oh).reshape(1, 1, oh, 1) * stride + io
        cols = np.arange(ow).reshape(1, 1, 1, ow) * stride + jo
        ni = np.arange(n).reshape(n, 1, 1, 1)
        ci = np.arange(c).reshape(1, c, 1, 1)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        np.add.at(gxp, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape),
                        rows, cols), g)
        return (gxp[:, :, padding:padding + h, padding:padding + wd],)

    return _record(out, (x,), grad_fn)


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g / (h * wd), x.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), grad_fn)


_UPSAMPLE_CACHE: dict = {}


def _interp_matrix(size_in: int, factor: int, dtype) -> np.ndarray:
    """(factor*size_in, size_in) bilinear matrix, half-pixel source mapping."""
    key = (size_in, factor, np.dtype(dtype).name)
    mat = _UPSAMPLE_CACHE.get(key)
    if mat is None:
        size_out = size_in * factor
        mat = np.zeros((size_out, size_in), dtype=np.float64)
        for o in range(size_out):
            src = (o + 0.5) / factor - 0.5
            src = min(max(src, 0.0), size_in - 1.0)
            i0 = int(np.floor(src))
            i0 = min(i0, size_in - 1)
            t = src - i0
            i1 = min(i0 + 1, size_in - 1)
            mat[o, i0] += 1.0 - t
            mat[o, i1] += t
        mat = mat.astype(dtype)
        _UPSAMPLE_CACHE[key] = mat
    return mat


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor not in (2, 4, 8):
        raise ValueError(f"bilinear_upsample: factor must be 2, 4, or 8, got {factor}")
    n, c, h, wd = x.shape
    uh = _interp_matrix(h, factor, x.dtype)
    uw = _interp_matrix(wd, factor, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", uh, x.data, uw, optimize=True)

    def grad_fn(g):
        return (np.einsum("oh,ncop,pw->nchw", uh, g, uw, optimize=True),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# batched matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of (N, P, Q) with (N, Q, R)."""
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError(f"matmul: expects rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"matmul: inner extents disagree, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _record(out, (a, b), grad_fn)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), grad_fn)
