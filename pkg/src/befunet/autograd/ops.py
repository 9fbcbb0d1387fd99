"""Differentiable operations on :class:`Tensor`.

Image-like tensors are channels-last: ``[B, H, W, C]``. Only contraction
ops (matmul, the convolutions) report multiply-adds to active
:class:`OpCounter` instances.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    count_multiply_adds,
    make_result,
)

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return as_tensor(np.asarray(a, dtype=dtype) if dtype is not None else a)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: operands {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -----------------------------------------------

def add(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return make_result(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value was inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return make_result(out, (a,), bw)


# -- reductions and shape ops ----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over empty axes of shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no operands")
    ref = tensors[0]
    ax = axis % ref.ndim
    for i, t in enumerate(tensors):
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError(
                f"concat: operand 0 {ref.shape} and operand {i} {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def roll(a: Tensor, shift, axis) -> Tensor:
    """Cyclic shift (``np.roll`` semantics)."""
    if isinstance(shift, int):
        back = -shift
    else:
        back = tuple(-s for s in shift)
    return make_result(np.roll(a.data, shift, axis), (a,), lambda g: (np.roll(g, back, axis),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from None
    return make_result(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- contractions ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, a={a.shape} b={b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    count_multiply_adds(int(np.prod(batch, dtype=np.int64)) * m * n * k)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    y = matmul(flat, weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],))


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation). ``x`` is NHWC, ``weight`` is ``[kh, kw, cin, cout]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected x [B,H,W,C] and weight [kh,kw,cin,cout], got {x.shape} and {weight.shape}")
    B, H, W, C = x.shape
    kh, kw, cin, cout = weight.shape
    if cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {cin}")
    Ho, Wo = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    count_multiply_adds(B * Ho * Wo * kh * kw * cin * cout)
    xp = _pad_hw(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    # [B,Ho,Wo,C,kh,kw] -> [B*Ho*Wo, kh*kw*C]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, Ho, Wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + H, padding:padding + W, :] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0).reshape(bias.shape)

    return make_result(out, parents, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution. ``weight`` is ``[kh, kw, C]``."""
    if x.ndim != 4 or weight.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expected x [B,H,W,C] and weight [kh,kw,C], got {x.shape} and {weight.shape}")
    B, H, W, C = x.shape
    kh, kw, wc = weight.shape
    if wc != C:
        raise ShapeError(f"depthwise_conv2d: input has {C} channels, weight has {wc}")
    Ho, Wo = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    count_multiply_adds(B * Ho * Wo * kh * kw * C)
    xp = _pad_hw(x.data, padding)
    wd = weight.data
    out = np.zeros((B, Ho, Wo, C), dtype=np.result_type(xp, wd))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] * wd[i, j]

    def bw(g):
        gw = np.zeros_like(wd) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride), slice(None))
                if gw is not None:
                    gw[i, j] = (xp[sl] * g).sum(axis=(0, 1, 2))
                if gxp is not None:
                    gxp[sl] += g * wd[i, j]
        gx = None
        if gxp is not None:
            gx = gxp[:, padding:padding + H, padding:padding + W, :] if padding else gxp
        return gx, gw

    return make_result(out, (x, weight), bw)


def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the two spatial axes of an NHWC tensor by ``p``."""
    if p == 0:
        return x
    B, H, W, C = x.shape
    out = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")

    def bw(g):
        g = g.copy()
        g[:, p, :, :] += g[:, :p, :, :].sum(axis=1)
        g[:, H + p - 1, :, :] += g[:, H + p:, :, :].sum(axis=1)
        g = g[:, p:H + p]
        g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
        g[:, :, W + p - 1, :] += g[:, :, W + p:, :].sum(axis=2)
        return (np.ascontiguousarray(g[:, :, p:W + p]),)

    return make_result(out, (x,), bw)


# -- pooling and resampling ---------------------------------------------------

def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling (stride ``k``); ties route to the first maximum."""
    B, H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"maxpool2d: spatial dims {H}x{W} not divisible by {k}")
    Ho, Wo = H // k, W // k
    blocks = x.data.reshape(B, Ho, k, Wo, k, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, Ho, Wo, C, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (gx,)

    return make_result(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(B, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return make_result(out, (x,), bw)


def _bilinear_matrix(n: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres with edge clamping (align_corners=False)
    m = np.zeros((n * factor, n), dtype=dtype)
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        t = src - lo
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Separable bilinear upsampling with half-pixel alignment."""
    B, H, W, C = x.shape
    mh = _bilinear_matrix(H, factor, x.dtype)
    mw = _bilinear_matrix(W, factor, x.dtype)
    out = np.einsum("ph,bhwc,qw->bpqc", mh, x.data, mw, optimize=True)

    def bw(g):
        return (np.einsum("ph,bpqc,qw->bhwc", mh, g, mw, optimize=True),)

    return make_result(out, (x,), bw)


# -- normalisation and attention helpers --------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    D = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (D,):
            raise ShapeError(f"layer_norm: {name} {p.shape} does not match feature dim {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        gh = g * gamma.data if gamma is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        red = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return make_result(out, tuple(parents), bw)


def masked_fill_const(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    keep = ~np.broadcast_to(mask, x.shape)
    out = np.where(keep, x.data, value).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * keep,))


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return make_result(out, (a, b), bw)


# -- Tensor operator sugar ------------------------------------------------------

def _install() -> None:
    T = Tensor
    T.__add__ = lambda s, o: add(s, o)
    T.__radd__ = lambda s, o: add(o, s)
    T.__sub__ = lambda s, o: sub(s, o)
    T.__rsub__ = lambda s, o: sub(o, s)
    T.__mul__ = lambda s, o: mul(s, o)
    T.__rmul__ = lambda s, o: mul(o, s)
    T.__truediv__ = lambda s, o: div(s, o)
    T.__rtruediv__ = lambda s, o: div(o, s)
    T.__neg__ = lambda s: neg(s)
    T.__pow__ = lambda s, p: power(s, p)
    T.__matmul__ = lambda s, o: matmul(s, o)
    T.__getitem__ = lambda s, idx: getitem(s, idx)
    T.sum = lambda s, axis=None, keepdims=False: sum(s, axis, keepdims)
    T.mean = lambda s, axis=None, keepdims=False: mean(s, axis, keepdims)
    T.reshape = lambda s, *shape: reshape(s, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
    T.transpose = lambda s, *axes: transpose(s, axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else (axes or None))
    T.exp = lambda s: exp(s)
    T.log = lambda s: log(s)
    T.relu = lambda s: relu(s)


_install()
