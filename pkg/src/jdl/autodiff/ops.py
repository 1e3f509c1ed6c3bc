"""Differentiable primitives.

Forward functions compute with plain numpy and register a backward closure
via ``record``. Convolutions use strided window views plus BLAS tensordot;
the scatter in their backward loops over the (small) kernel footprint so the
reduction order is fixed and results do not depend on worker count.

Broadcasting is deliberately narrow: identical shapes, scalar against
tensor, and singleton-dimension bias adds. Anything else needs an explicit
reshape so every backward rule stays auditable.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np

from ..errors import ShapeMismatch, UnsupportedKind
from .tensor import Tensor, record

_EXP_CAP = 700.0  # exp(700) is near the float64 overflow edge


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_allowed(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if np.prod(sa, dtype=int) == 1 or np.prod(sb, dtype=int) == 1:
        return True
    if len(sa) == len(sb):
        return all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb))
    # trailing bias: (F,) against (..., F)
    short, long = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return len(short) == 1 and long[-1] == short[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were expanded by broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_allowed(a.shape, b.shape):
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_allowed(a.shape, b.shape):
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return record("mul", (a, b), out, backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", (a, b), out, backward_fn)


def _to_nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _to_nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def _im2col_nhwc(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Materialize windows of a padded NHWC batch as (N*OH*OW, KH*KW*C).

    The innermost (kw, c) run is contiguous in memory, which makes this the
    cheap direction for the gather.
    """
    n, hp, wp, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, oh, ow, kh, kw, c),
        (s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False)
    return np.ascontiguousarray(view).reshape(n * oh * ow, kh * kw * c)


def _col2im_nhwc(dcols: np.ndarray, n, c, hp, wp, kh, kw, stride, oh, ow) -> np.ndarray:
    """Adjoint of the NHWC im2col: scatter-add per kernel tap."""
    acc = np.zeros((n, hp, wp, c))
    d6 = dcols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            acc[:, i:i + oh * stride:stride,
                j:j + ow * stride:stride, :] += d6[:, :, :, i, j, :]
    return acc


def _pad_hw_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _layout_dims(x: Tensor, layout: str):
    if x.data.ndim != 4:
        raise ShapeMismatch(f"need a 4-d batch, got {x.shape}")
    if layout == "nchw":
        n, c, h, w = x.shape
    elif layout == "nhwc":
        n, h, w, c = x.shape
    else:
        raise ShapeMismatch(f"unknown layout {layout!r}")
    return n, c, h, w


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           layout: str = "nchw") -> Tensor:
    """2-d cross-correlation with (C_out, C_in, KH, KW) weights.

    The public contract is NCHW input; ``layout="nhwc"`` is the fast path
    used internally by the models (identical math, channel-last storage).
    """
    if w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: weights {w.shape}")
    n, c, h, wid = _layout_dims(x, layout)
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d: {c} input channels, weights expect {ci}")
    # floor semantics: trailing rows/cols that no window reaches get zero grad
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch("conv2d: empty output")

    nhwc = x.data if layout == "nhwc" else _to_nhwc(x.data)
    xp = _pad_hw_nhwc(nhwc, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    cols = _im2col_nhwc(xp, kh, kw, stride, oh, ow)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, co)
    out = (cols @ wmat).reshape(n, oh, ow, co)
    if layout == "nchw":
        out = _to_nchw(out)

    def backward_fn(g):
        g2 = (g if layout == "nhwc" else _to_nhwc(g)).reshape(n * oh * ow, co)
        dw = (cols.T @ g2).reshape(kh, kw, c, co).transpose(3, 2, 0, 1)
        dxp = _col2im_nhwc(g2 @ wmat.T, n, c, hp, wp, kh, kw, stride, oh, ow)
        dx = dxp[:, padding:padding + h, padding:padding + wid, :] if padding else dxp
        return (dx if layout == "nhwc" else _to_nchw(dx)), dw

    return record("conv2d", (x, w), out, backward_fn)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                     layout: str = "nchw") -> Tensor:
    """Adjoint of conv2d; weights laid out (C_in, C_out, KH, KW)."""
    if w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d_transpose: weights {w.shape}")
    n, c, h, wid = _layout_dims(x, layout)
    ci, co, kh, kw = w.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d_transpose: {c} input channels, weights expect {ci}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wid - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ShapeMismatch("conv2d_transpose: empty output")

    hf, wf = (h - 1) * stride + kh, (wid - 1) * stride + kw
    nhwc = x.data if layout == "nhwc" else _to_nhwc(x.data)
    xmat = nhwc.reshape(n * h * wid, c)
    # taps laid out to match the NHWC col2im: (kh, kw, co) per input channel
    wmat = w.data.transpose(0, 2, 3, 1).reshape(c, kh * kw * co)
    full = _col2im_nhwc((xmat @ wmat).reshape(n, h, wid, kh, kw, co),
                        n, co, hf, wf, kh, kw, stride, h, wid)
    out = full[:, padding:padding + oh, padding:padding + ow, :] if padding else full
    if layout == "nchw":
        out = _to_nchw(out)

    def backward_fn(g):
        gn = g if layout == "nhwc" else _to_nhwc(g)
        gp = _pad_hw_nhwc(gn, padding)
        gcols = _im2col_nhwc(gp, kh, kw, stride, h, wid)   # (N*H*W, KH*KW*Co)
        # reorder gathered taps (kh,kw,co) -> rows to match wmat columns
        dx = (gcols @ wmat.T).reshape(n, h, wid, c)
        dw = (xmat.T @ gcols).reshape(c, kh, kw, co).transpose(0, 3, 1, 2)
        return (dx if layout == "nhwc" else _to_nchw(dx)), dw

    return record("conv2d_transpose", (x, w), out, backward_fn)


def avg_pool2d(x: Tensor, kernel: int, layout: str = "nchw") -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide exactly."""
    n, c, h, w = _layout_dims(x, layout)
    k = int(kernel)
    if k < 1 or h % k or w % k:
        raise ShapeMismatch(f"avg_pool2d: kernel {k} does not tile {h}x{w}")
    oh, ow = h // k, w // k
    if layout == "nchw":
        out = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))
    else:
        out = x.data.reshape(n, oh, k, ow, k, c).mean(axis=(2, 4))

    def backward_fn(g):
        if layout == "nchw":
            gd = np.broadcast_to(g[:, :, :, None, :, None] / (k * k),
                                 (n, c, oh, k, ow, k))
            return (gd.reshape(n, c, h, w).copy(),)
        gd = np.broadcast_to(g[:, :, None, :, None, :] / (k * k),
                             (n, oh, k, ow, k, c))
        return (gd.reshape(n, h, w, c).copy(),)

    return record("avg_pool2d", (x,), out, backward_fn)


def upsample_nearest(x: Tensor, scale: int, layout: str = "nchw") -> Tensor:
    n, c, h, w = _layout_dims(x, layout)
    s = int(scale)
    if s < 1:
        raise ShapeMismatch("upsample_nearest: scale must be >= 1")
    ax = (2, 3) if layout == "nchw" else (1, 2)
    out = x.data.repeat(s, axis=ax[0]).repeat(s, axis=ax[1])

    def backward_fn(g):
        if layout == "nchw":
            return (g.reshape(n, c, h, s, w, s).sum(axis=(3, 5)),)
        return (g.reshape(n, h, s, w, s, c).sum(axis=(2, 4)),)

    return record("upsample_nearest", (x,), out, backward_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; branchless select keeps this fast
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (x,), out, backward_fn)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward_fn(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return record("silu", (x,), out, backward_fn)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data >= 0, x.data, slope * x.data)

    def backward_fn(g):
        return (g * np.where(x.data >= 0, 1.0, slope),)

    return record("leaky_relu", (x,), out, backward_fn)


def exp(x: Tensor) -> Tensor:
    """Elementwise exp, input capped so finite inputs stay finite."""
    capped = np.minimum(x.data, _EXP_CAP)
    out = np.exp(capped)

    def backward_fn(g):
        return (g * out * (x.data < _EXP_CAP),)

    return record("exp", (x,), out, backward_fn)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               groups: int | None = None, eps: float = 1e-5,
               layout: str = "nchw") -> Tensor:
    """Group normalization over (C/G, H, W) per sample and group."""
    n, c, h, w = _layout_dims(x, layout)
    g_ = int(groups) if groups is not None else builtins.min(4, c)
    if c % g_:
        raise ShapeMismatch(f"group_norm: {g_} groups do not divide {c} channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("group_norm: gamma/beta must have shape (C,)")
    cg = c // g_

    if layout == "nchw":
        xg = x.data.reshape(n, g_, cg * h * w)
        red = (2,)
    else:
        xg = x.data.reshape(n, h * w, g_, cg)
        red = (1, 3)
    mu = xg.mean(axis=red, keepdims=True)
    var = xg.var(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    if layout == "nchw":
        xhat4 = xhat.reshape(n, c, h, w)
        gshape = (1, c, 1, 1)
        sum_axes = (0, 2, 3)
    else:
        xhat4 = xhat.reshape(n, h, w, c)
        gshape = (c,)
        sum_axes = (0, 1, 2)
    out = xhat4 * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def backward_fn(gr):
        dgamma = (gr * xhat4).sum(axis=sum_axes)
        dbeta = gr.sum(axis=sum_axes)
        dxhat = (gr * gamma.data.reshape(gshape)).reshape(xg.shape)
        mean_dxhat = dxhat.mean(axis=red, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=red, keepdims=True)
        dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return dx.reshape(x.data.shape), dgamma, dbeta

    return record("group_norm", (x, gamma, beta), out, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = list(tensors)
    if len(ts) < 2:
        raise ShapeMismatch("concat: need at least two tensors")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeMismatch("concat: rank mismatch")
        if other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ShapeMismatch("concat: non-axis dims must match")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        slicer = [slice(None)] * g.ndim
        parts = []
        for i in range(len(ts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(slicer)])
        return tuple(parts)

    return record("concat", ts, out, backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if np.prod(shape, dtype=int) != x.size:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}")
    orig = x.shape
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(orig),)

    return record("reshape", (x,), out, backward_fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    out = np.asarray(x.data.sum())

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).astype(np.float64, copy=True),)

    return record("sum", (x,), out, backward_fn)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean())

    def backward_fn(g):
        return (np.full(x.shape, float(g) / n),)

    return record("mean", (x,), out, backward_fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements, reduced to a scalar."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = pred.size
    out = np.asarray((diff * diff).mean())

    def backward_fn(g):
        d = (2.0 / n) * diff * g
        return d, -d

    return record("mse", (pred, target), out, backward_fn)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy against sigmoid(logits), numerically stable."""
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"bce_with_logits: {logits.shape} vs {targets.shape}")
    x, y = logits.data, targets.data
    n = logits.size
    # max(x,0) - x*y + log(1 + exp(-|x|))
    out = np.asarray((np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean())

    def backward_fn(g):
        dx = (_sigmoid(x) - y) * (g / n)
        dy = -x * (g / n)
        return dx, dy

    return record("bce_with_logits", (logits, targets), out, backward_fn)


_DISPATCH = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_transpose,
    "avg_pool2d": avg_pool2d,
    "upsample_nearest": upsample_nearest,
    "silu": silu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "group_norm": group_norm,
    "concat": concat,
    "reshape": reshape,
    "sum": sum,
    "mean": mean,
    "mse": mse,
    "bce_with_logits": bce_with_logits,
    "exp": exp,
}


def forward_primitive(kind: str, inputs, **params) -> Tensor:
    """Apply a primitive by name.

    ``inputs`` is a Tensor or a sequence of Tensors; op-specific arguments
    (stride, padding, kernel, axis, shape, slope, groups, eps, scale) go in
    ``params``.
    """
    fn = _DISPATCH.get(kind)
    if fn is None:
        raise UnsupportedKind(f"unknown primitive kind {kind!r}")
    if kind == "concat":
        return fn(inputs, **params)
    if isinstance(inputs, Tensor):
        inputs = (inputs,)
    return fn(*inputs, **params)


PRIMITIVE_KINDS = tuple(_DISPATCH)
