"""Differentiable operators.

Shapes follow the single-image convention (``c x h x w`` maps, ``n x d``
token matrices) and additionally accept leading batch axes. Elementwise
binary ops broadcast the way numpy does; gradients are summed back to each
operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .core import DimensionError, NumericError, Tensor, as_tensor, emit

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dt))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise


def add(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape
    return emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return emit(ad * bd, (a, b), bw)


def div(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return emit(out, (a, b), bw)


def abs(x):
    x = as_tensor(x)
    s = np.sign(x.data)
    return emit(np.abs(x.data), (x,), lambda g: (g * s,))


# shape plumbing


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    return emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, key):
    x = as_tensor(x)
    src_shape, dt = x.shape, x.dtype

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(k is None or k is Ellipsis or isinstance(k, (slice, int, np.integer)) for k in keys)

    def bw(g):
        out = np.zeros(src_shape, dtype=dt)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return emit(np.ascontiguousarray(x.data[key]), (x,), bw)


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(xs)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return emit(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), bw)


def take(x, idx, axis=1):
    """Gather along ``axis`` with an integer index array of any shape.

    The index array may repeat entries (reflect padding does); the backward
    pass scatter-adds through :func:`grl.tensor.kernels.scatter_add`.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % x.ndim
    shp = x.shape
    pre = int(np.prod(shp[:ax], dtype=np.int64))
    post = int(np.prod(shp[ax + 1 :], dtype=np.int64))
    flat = idx.reshape(-1)
    out = x.data.reshape(pre, shp[ax], post)[:, flat, :]
    out_shape = shp[:ax] + idx.shape + shp[ax + 1 :]

    def bw(g):
        gs = kernels.scatter_add(np.ascontiguousarray(g).reshape(pre, flat.size, post), flat, shp[ax])
        return (gs.reshape(shp),)

    return emit(out.reshape(out_shape), (x,), bw)


# reductions


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shp = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shp).copy(),)

    return emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return emit(ad @ bd, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``d_in x d_out``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, W {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear bias shape {b.shape} does not match W {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, wd.shape[0])
    out = (x2 @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return emit(out, parents, bw)


# nonlinearities


def softmax_rows(x):
    """Row softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return emit(y, (x,), bw)


def activation(x, kind):
    x = as_tensor(x)
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return emit(xd * mask, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        # tanh form: no overflow for large |x|
        y = 0.5 * (1.0 + np.tanh(0.5 * xd))
        return emit(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "gelu":
        # tanh approximation
        x2 = xd * xd
        inner = SQRT_2_OVER_PI * (xd + GELU_C * x2 * xd)
        th = np.tanh(inner)
        y = 0.5 * xd * (1.0 + th)

        def bw(g):
            dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x2)
            return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

        return emit(y, (x,), bw)
    raise ValueError(f"unknown activation {kind!r}")


def gelu(x):
    return activation(x, "gelu")


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs d={d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = g.reshape(-1, d)
        xh = xhat.reshape(-1, d)
        dgamma = (gg * xh).sum(axis=0)
        dbeta = gg.sum(axis=0)
        gx = g * gamma.data
        gx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, dgamma, dbeta

    return emit(out, (x, gamma, beta), bw)


# image ops


def _pad_zero(xd, pad):
    if pad == 0:
        return xd
    widths = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(xd, widths)


def conv2d(x, k, bias=None, pad=0):
    """2-D cross-correlation (no kernel flip) with zero padding and stride 1.

    ``x`` is ``c_in x h x w`` or ``b x c_in x h x w``; ``k`` is
    ``c_out x c_in x kh x kw``.
    """
    x, k = as_tensor(x), as_tensor(k)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects (b,)c,h,w input and 4-D kernel, got {x.shape}, {k.shape}")
    cout, cin, kh, kw = k.shape
    if xd.shape[1] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {k.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    h, w = xd.shape[2] + 2 * pad, xd.shape[3] + 2 * pad
    if kh > h or kw > w:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None:
        bias = as_tensor(bias)
    xp = _pad_zero(xd, pad)
    cols = kernels.im2col(xp, kh, kw)
    b, ho, wo, kk = cols.shape
    cols2 = cols.reshape(-1, kk)
    wmat = k.data.reshape(cout, kk)
    out = (cols2 @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        gm = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gk = (gm.T @ cols2).reshape(k.shape)
        gcols = (gm @ wmat).reshape(b, ho, wo, kk)
        gx = kernels.col2im(gcols, cin, kh, kw)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        gx = np.ascontiguousarray(gx)
        if single:
            gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, g4.sum(axis=(0, 2, 3))

    parents = (x, k) if bias is None else (x, k, bias)
    return emit(out, parents, bw)


def pool2d(x, s, mode="avg", axes=(-2, -1)):
    """Non-overlapping ``s x s`` mean/max pooling over two spatial axes.

    ``s`` may be an int or a per-axis pair. Extents must be divisible.
    """
    x = as_tensor(x)
    sh, sw = (s, s) if np.isscalar(s) else s
    a0, a1 = axes[0] % x.ndim, axes[1] % x.ndim
    if a1 != a0 + 1:
        raise ValueError("pool2d axes must be adjacent")
    shp = x.shape
    h, w = shp[a0], shp[a1]
    if h % sh or w % sw:
        raise DimensionError(f"pool2d: extents {h}x{w} not divisible by {sh}x{sw}")
    split = shp[:a0] + (h // sh, sh, w // sw, sw) + shp[a1 + 1 :]
    xs = x.data.reshape(split)
    red = (a0 + 1, a0 + 3)
    if mode == "avg":
        out = xs.mean(axis=red)
        scale = 1.0 / (sh * sw)

        def bw(g):
            ge = np.expand_dims(g, red)
            return (np.broadcast_to(ge * scale, split).reshape(shp).astype(x.dtype),)

    elif mode == "max":
        out = xs.max(axis=red)
        # route the gradient to the first maximum of each block
        moved = np.moveaxis(xs, (a0 + 1, a0 + 3), (-2, -1))
        blk = moved.reshape(moved.shape[:-2] + (sh * sw,))
        first = blk.argmax(axis=-1)
        onehot = (np.arange(sh * sw) == first[..., None]).astype(x.dtype)

        def bw(g):
            gb = (onehot * g[..., None]).reshape(moved.shape)
            return (np.moveaxis(gb, (-2, -1), (a0 + 1, a0 + 3)).reshape(shp),)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return emit(np.ascontiguousarray(out), (x,), bw)


def pixel_shuffle(x, r):
    """``(..., c*r*r, h, w) -> (..., c, h*r, w*r)``; out[c, h*r+i, w*r+j] = x[c*r*r + i*r + j, h, w]."""
    x = as_tensor(x)
    *lead, cr2, h, w = x.shape
    if cr2 % (r * r):
        raise DimensionError(f"pixel_shuffle: {cr2} channels not divisible by r^2={r * r}")
    c = cr2 // (r * r)
    n = len(lead)
    y = reshape(x, tuple(lead) + (c, r, r, h, w))
    perm = tuple(range(n)) + tuple(n + p for p in (0, 3, 1, 4, 2))
    y = transpose(y, perm)
    return reshape(y, tuple(lead) + (c, h * r, w * r))


def pixel_unshuffle(x, r):
    x = as_tensor(x)
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise DimensionError(f"pixel_unshuffle: {hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    n = len(lead)
    y = reshape(x, tuple(lead) + (c, h, r, w, r))
    perm = tuple(range(n)) + tuple(n + p for p in (0, 2, 4, 1, 3))
    y = transpose(y, perm)
    return reshape(y, tuple(lead) + (c * r * r, h, w))


def l1_loss(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return mean(abs(sub(pred, target)))
