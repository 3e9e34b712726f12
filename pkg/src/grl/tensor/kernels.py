"""Hot inner loops: gather-backward scatter and convolution patch packing.

Every kernel has a numpy implementation and a numba implementation with the
same signature. The public names dispatch on :data:`grl._accel.USE_NUMBA`.
Both paths use a fixed accumulation order, so each is deterministic on its
own; they agree to rounding, not bit-for-bit.
"""

import numpy as np

from .._accel import USE_NUMBA, njit


# scatter_add: out[b, idx[m], c] += src[b, m, c]


def scatter_add_numpy(src, idx, size):
    b, _, c = src.shape
    out = np.zeros((b, size, c), dtype=src.dtype)
    np.add.at(out, (slice(None), idx), src)
    return out


@njit(cache=True)
def _scatter_add_loop(src, idx, out):
    nb, nm, nc = src.shape
    for b in range(nb):
        for m in range(nm):
            j = idx[m]
            for c in range(nc):
                out[b, j, c] += src[b, m, c]


def scatter_add_numba(src, idx, size):
    b, _, c = src.shape
    out = np.zeros((b, size, c), dtype=src.dtype)
    _scatter_add_loop(np.ascontiguousarray(src), np.ascontiguousarray(idx, dtype=np.int64), out)
    return out


# im2col: (B, C, H, W) already padded -> (B, H', W', C*kh*kw)


def im2col_numpy(x, kh, kw):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: (B, C, H', W', kh, kw)
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho, wo, c * kh * kw)


@njit(cache=True)
def _im2col_loop(x, kh, kw, out):
    nb, nc, h, w = x.shape
    ho = h - kh + 1
    wo = w - kw + 1
    for b in range(nb):
        for i in range(ho):
            for j in range(wo):
                k = 0
                for c in range(nc):
                    for u in range(kh):
                        for v in range(kw):
                            out[b, i, j, k] = x[b, c, i + u, j + v]
                            k += 1


def im2col_numba(x, kh, kw):
    b, c, h, w = x.shape
    out = np.empty((b, h - kh + 1, w - kw + 1, c * kh * kw), dtype=x.dtype)
    _im2col_loop(np.ascontiguousarray(x), kh, kw, out)
    return out


# col2im: adjoint of im2col, (B, H', W', C*kh*kw) -> (B, C, H'+kh-1, W'+kw-1)


def col2im_numpy(cols, c, kh, kw):
    b, ho, wo, _ = cols.shape
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, ho + kh - 1, wo + kw - 1), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + ho, v : v + wo] += cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return out


@njit(cache=True)
def _col2im_loop(cols, nc, kh, kw, out):
    nb, ho, wo, _ = cols.shape
    for b in range(nb):
        for c in range(nc):
            for u in range(kh):
                for v in range(kw):
                    k = (c * kh + u) * kw + v
                    for i in range(ho):
                        for j in range(wo):
                            out[b, c, i + u, j + v] += cols[b, i, j, k]


def col2im_numba(cols, c, kh, kw):
    b, ho, wo, _ = cols.shape
    out = np.zeros((b, c, ho + kh - 1, wo + kw - 1), dtype=cols.dtype)
    _col2im_loop(np.ascontiguousarray(cols), c, kh, kw, out)
    return out


if USE_NUMBA:
    scatter_add, im2col, col2im = scatter_add_numba, im2col_numba, col2im_numba
else:
    scatter_add, im2col, col2im = scatter_add_numpy, im2col_numpy, col2im_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
