"""Differentiable dense ops used by the network.

Every op accepts :class:`Tensor` (or anything ``np.asarray`` understands for
non-differentiable operands), returns a :class:`Tensor`, and registers a
backward closure. Convolutions use an im2col/col2im formulation so the heavy
lifting lands in BLAS.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import (
    ConfigurationError,
    Tensor,
    as_tensor,
    is_meta,
    make_result,
    meta_array,
    record_macs,
)


def _meta(shape, dtype) -> Tensor:
    return Tensor(meta_array(shape, dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ConfigurationError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    if is_meta():
        return _meta(np.broadcast_shapes(a.shape, b.shape), a.dtype)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    if is_meta():
        return _meta(np.broadcast_shapes(a.shape, b.shape), a.dtype)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    if is_meta():
        return _meta(np.broadcast_shapes(a.shape, b.shape), a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    if is_meta():
        return _meta(np.broadcast_shapes(a.shape, b.shape), a.dtype)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    if is_meta():
        return _meta(x.shape, x.dtype)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if is_meta():
        return _meta(x.shape, x.dtype)
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,))


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    if is_meta():
        return _meta(x.shape, x.dtype)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    if is_meta():
        return _meta(x.shape, x.dtype)
    s = expit(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    if is_meta():
        return _meta(x.shape, x.dtype)
    xd = x.data
    s = expit(xd)
    return make_result(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "silu": silu, "sigmoid": sigmoid, "identity": identity}


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    if is_meta():
        return _meta(x.shape, x.dtype)
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def backward(g):
        gs = g * s
        gs -= s * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return make_result(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    if is_meta():
        return _meta(x.shape, x.dtype)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def _normalize_last(xd: np.ndarray, eps: float):
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def _normalize_last_backward(dxhat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (dxhat - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the per-feature affine."""
    if gamma is not None and gamma.shape != (x.shape[-1],):
        raise ConfigurationError(f"layer_norm gamma shape {gamma.shape} != ({x.shape[-1]},)")
    if is_meta():
        return _meta(x.shape, x.dtype)
    xhat, rstd = _normalize_last(x.data, eps)
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gd if gd is not None else g
        dx = _normalize_last_backward(dxhat, xhat, rstd) if x.requires_grad else None
        dg = (g * xhat).sum(axis=red) if gamma is not None and gamma.requires_grad else None
        db = g.sum(axis=red) if beta is not None and beta.requires_grad else None
        return dx, dg, db

    parents = (x, gamma if gamma is not None else Tensor(0.0),
               beta if beta is not None else Tensor(0.0))
    return make_result(out, parents, backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups of an (N, C, H, W) map."""
    n, c, h, w = x.shape
    if c % groups:
        raise ConfigurationError(f"group_norm: channels {c} not divisible by groups {groups}")
    if is_meta():
        return _meta(x.shape, x.dtype)
    xg = x.data.reshape(n, groups, -1)
    xhat_g, rstd = _normalize_last(xg, eps)
    xhat = xhat_g.reshape(n, c, h, w)
    gd = gamma.data.reshape(1, c, 1, 1) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = g * gd if gd is not None else g
        dx = None
        if x.requires_grad:
            dx = _normalize_last_backward(dxhat.reshape(n, groups, -1), xhat_g, rstd).reshape(n, c, h, w)
        dg = (g * xhat).sum(axis=(0, 2, 3)) if gamma is not None and gamma.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if beta is not None and beta.requires_grad else None
        return dx, dg, db

    parents = (x, gamma if gamma is not None else Tensor(0.0),
               beta if beta is not None else Tensor(0.0))
    return make_result(out, parents, backward)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    if is_meta():
        return _meta(_reduced_shape(shape, axis, keepdims), x.dtype)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, _norm_axes(axis, len(shape)))
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return make_result(out, (x,), backward)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def _reduced_shape(shape, axis, keepdims):
    if axis is None:
        return (1,) * len(shape) if keepdims else ()
    axes = _norm_axes(axis, len(shape))
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def amax(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; gradient is shared equally among tied maxima."""
    shape = x.shape
    if is_meta():
        return _meta(_reduced_shape(shape, axis, keepdims), x.dtype)
    m = x.data.max(axis=axis, keepdims=True)
    hit = x.data == m
    share = hit / hit.sum(axis=axis, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=_norm_axes(axis, len(shape)))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, _norm_axes(axis, len(shape)))
        return ((g * share).astype(x.dtype, copy=False),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in _norm_axes(axis, x.ndim)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    if is_meta():
        shape = list(shape)
        if -1 in shape:
            known = int(np.prod([s for s in shape if s != -1]))
            shape[shape.index(-1)] = x.size // known
        return _meta(shape, x.dtype)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    if is_meta():
        return _meta(tuple(x.shape[a] for a in axes), x.dtype)
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    if is_meta():
        return _meta(shape, x.dtype)
    return make_result(np.broadcast_to(x.data, shape).copy(), (x,),
                       lambda g: (_unbroadcast(g, src),))


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    if is_meta():
        return _meta(np.empty(src, dtype=np.int8)[index].shape, x.dtype)
    out = x.data[index]
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        gz = np.zeros(src, dtype=g.dtype)
        if basic:
            gz[index] += g
        else:
            np.add.at(gz, index, g)
        return (gz,)

    return make_result(np.array(out, copy=True), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ConfigurationError("concat of an empty list")
    axis = _check_axis(axis, xs[0].ndim)
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, xs[0].shape))
                                       if i != axis):
            raise ConfigurationError(f"concat shape mismatch {t.shape} vs {xs[0].shape} on axis {axis}")
    if is_meta():
        shape = list(xs[0].shape)
        shape[axis] = int(np.sum([t.shape[axis] for t in xs]))
        return _meta(shape, xs[0].dtype)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def pad2d(x: Tensor, pad: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pad
    n, c, h, w = x.shape
    if is_meta():
        return _meta((n, c, h + top + bottom, w + left + right), x.dtype)
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g[:, :, top:top + h, left:left + w]),))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigurationError("matmul operands must be at least rank 2")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul inner dims {a.shape[-1]} != {b.shape[-2]}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    record_macs(int(np.prod(batch)) * m * k * n)
    if is_meta():
        return _meta(batch + (m, n), a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(np.matmul(ad, bd), (a, b), backward)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int):
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int, ho: int, wo: int):
    co, ci, kh, kw = w.shape
    if kh == kw == 1 and stride == 1:
        n = xp.shape[0]
        x3 = xp.reshape(n, ci, -1)
        return np.matmul(w.reshape(co, ci), x3).reshape(n, co, ho, wo)
    v = _windows(xp, kh, kw, stride, dilation, ho, wo)
    out = np.tensordot(v, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, Co)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padded_shape, stride: int, dilation: int):
    """Scatter ``g`` through the convolution back to the padded input grid (col2im)."""
    co, ci, kh, kw = w.shape
    n, _, ho, wo = g.shape
    if kh == kw == 1 and stride == 1:
        return np.matmul(w.reshape(co, ci).T, g.reshape(n, co, -1)).reshape(padded_shape)
    cols = np.tensordot(w, g, axes=([0], [1]))  # (Ci, kh, kw, N, Ho, Wo)
    dxp = np.zeros((ci, n) + tuple(padded_shape[2:]), dtype=g.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i * dilation : i * dilation + hs : stride,
                j * dilation : j * dilation + ws : stride] += cols[:, i, j]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def _conv_weight_grad(xp: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int, dilation: int):
    n, co, ho, wo = g.shape
    ci = xp.shape[1]
    if kh == kw == 1 and stride == 1:
        return np.tensordot(g.reshape(n, co, -1), xp.reshape(n, ci, -1),
                            axes=([0, 2], [0, 2])).reshape(co, ci, 1, 1)
    v = _windows(xp, kh, kw, stride, dilation, ho, wo)
    return np.tensordot(g, v, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"conv2d expects an (N,C,H,W) input, got rank {x.ndim}")
    n, c, h, w_ = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ConfigurationError(f"conv2d: input channels {c} != weight Cin {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise ConfigurationError("conv2d: stride and dilation must be >= 1")
    if bias is not None and bias.shape != (co,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w_, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d: input height/width {h}x{w_} too small for kernel")
    record_macs(n * co * ci * kh * kw * ho * wo)
    if is_meta():
        return _meta((n, co, ho, wo), x.dtype)

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out = _conv_forward(xp, wd, stride, dilation, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        dx = dw = db = None
        if x.requires_grad:
            dxp = _conv_input_grad(g, wd, xp.shape, stride, dilation)
            dx = dxp[:, :, padding:padding + h, padding:padding + w_] if padding else dxp
        if weight.requires_grad:
            dw = _conv_weight_grad(xp, g, kh, kw, stride, dilation)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    parents = (x, weight, bias if bias is not None else Tensor(0.0))
    return make_result(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0, dilation: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` has shape (Cin, Cout, k, k)."""
    if x.ndim != 4:
        raise ConfigurationError(f"conv_transpose2d expects rank 4, got {x.ndim}")
    n, c, h, w_ = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise ConfigurationError(f"conv_transpose2d: input channels {c} != weight Cin {ci}")
    if output_padding >= max(stride, dilation):
        raise ConfigurationError("conv_transpose2d: output_padding must be < stride or dilation")
    hf = (h - 1) * stride + dilation * (kh - 1) + 1 + output_padding
    wf = (w_ - 1) * stride + dilation * (kw - 1) + 1 + output_padding
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ConfigurationError("conv_transpose2d: padding too large for input")
    record_macs(n * ci * co * kh * kw * h * w_)
    if is_meta():
        return _meta((n, co, ho, wo), x.dtype)

    xd, wd = x.data, weight.data
    full = _conv_input_grad(np.ascontiguousarray(xd), wd, (n, co, hf, wf), stride, dilation)
    out = np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)

    def backward(g):
        gfull = np.zeros((n, co, hf, wf), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        dx = dw = db = None
        if x.requires_grad:
            dx = _conv_forward(gfull, wd, stride, dilation, h, w_) if not (kh == kw == 1 and stride == 1) \
                else np.matmul(wd.reshape(ci, co), gfull.reshape(n, co, -1)).reshape(n, ci, h, w_)
        if weight.requires_grad:
            dw = _conv_weight_grad(gfull, np.ascontiguousarray(xd), kh, kw, stride, dilation)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    parents = (x, weight, bias if bias is not None else Tensor(0.0))
    return make_result(out, parents, backward)


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def pooling_matrix(size: int, out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages input cells [floor(i*size/out), ceil((i+1)*size/out))."""
    m = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        start = (i * size) // out
        end = -((-(i + 1) * size) // out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int | None = None) -> Tensor:
    out_w = out_h if out_w is None else out_w
    n, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ConfigurationError(f"adaptive_avg_pool2d: output {out_h}x{out_w} invalid for input {h}x{w}")
    if is_meta():
        return _meta((n, c, out_h, out_w), x.dtype)
    if out_h == h and out_w == w:
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    ph = pooling_matrix(h, out_h, x.dtype)
    pw = pooling_matrix(w, out_w, x.dtype)
    out = np.matmul(ph, np.matmul(x.data, pw.T))

    def backward(g):
        return (np.matmul(ph.T, np.matmul(g, pw)),)

    return make_result(out, (x,), backward)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]; classes on axis 1."""
    target = np.asarray(target)
    n, k = logits.shape[:2]
    if target.shape != (n,) + logits.shape[2:]:
        raise ConfigurationError(f"cross_entropy: target shape {target.shape} vs logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ConfigurationError(f"cross_entropy: class index outside [0, {k})")
    if is_meta():
        return _meta((), logits.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    idx = np.expand_dims(target.astype(np.int64), 1)
    picked = np.take_along_axis(logp, idx, axis=1)
    count = picked.size
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=1) - 1, axis=1)
        return (p * (g / count),)

    return make_result(loss, (logits,), backward)


def is_finite(x: Tensor) -> bool:
    return bool(np.isfinite(x.data).all())

