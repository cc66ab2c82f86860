"""Hot numeric kernels: 2-D convolution (forward and both adjoints) and
pairwise squared distances.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one. The
numba path is used when numba imports cleanly and ``CADIT_DISABLE_NUMBA`` is
unset (or ``0``); :func:`use_backend` switches at runtime, which the tests and
``benchmarks/bench_kernels.py`` rely on to compare the two.

Layouts: activations are ``(batch, channels, height, width)``, conv weights
``(out_channels, in_channels, k, k)``. All arrays are float64.
"""
import contextlib
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_env = os.environ.get("CADIT_DISABLE_NUMBA", "").strip()
_backend = "numba" if HAVE_NUMBA and _env in ("", "0") else "numpy"


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# Convolutions run as im2col -> one GEMM -> col2im. Columns are laid out
# (n*ho*wo, k*k*c) with channel fastest, so both backends share the GEMM code
# and only the gather/scatter loops differ.

def _wmat(w):
    o, c, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(o, k * k * c)


def _unwmat(wm, c, k):
    o = wm.shape[0]
    return np.ascontiguousarray(wm.reshape(o, k, k, c).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------- numpy path

_index_cache = {}


def _gather_index(h, wd, k, stride, pad):
    key = (h, wd, k, stride, pad)
    idx = _index_cache.get(key)
    if idx is None:
        ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
        r = (np.arange(ho) * stride)[:, None, None, None] + np.arange(k)[None, None, :, None]
        c = (np.arange(wo) * stride)[None, :, None, None] + np.arange(k)[None, None, None, :]
        idx = (np.broadcast_to(r, (ho, wo, k, k)), np.broadcast_to(c, (ho, wo, k, k)), ho, wo)
        _index_cache[key] = idx
    return idx


def _im2col_np(x, k, stride, pad):
    n, c, h, wd = x.shape
    r, cc, ho, wo = _gather_index(h, wd, k, stride, pad)
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + wd, :] = x.transpose(0, 2, 3, 1)
    return xp[:, r, cc, :].reshape(n * ho * wo, k * k * c), ho, wo


def _col2im_np(cols, n, c, h, wd, k, stride, pad):
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    cols = cols.reshape(n, ho, wo, k, k, c)
    gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :] += \
                cols[:, :, :, di, dj, :]
    return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2))


def _pairwise_sq_dist_np(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k, stride, pad):
        n, c, h, wd = x.shape
        ho = (h + 2 * pad - k) // stride + 1
        wo = (wd + 2 * pad - k) // stride + 1
        cols = np.zeros((n * ho * wo, k * k * c))
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    for di in range(k):
                        yy = i * stride - pad + di
                        if yy < 0 or yy >= h:
                            continue
                        for dj in range(k):
                            xx = j * stride - pad + dj
                            if xx < 0 or xx >= wd:
                                continue
                            base = (di * k + dj) * c
                            for ic in range(c):
                                cols[row, base + ic] = x[b, ic, yy, xx]
        return cols, ho, wo

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, wd, k, stride, pad):
        ho = (h + 2 * pad - k) // stride + 1
        wo = (wd + 2 * pad - k) // stride + 1
        gx = np.zeros((n, c, h, wd))
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    for di in range(k):
                        yy = i * stride - pad + di
                        if yy < 0 or yy >= h:
                            continue
                        for dj in range(k):
                            xx = j * stride - pad + dj
                            if xx < 0 or xx >= wd:
                                continue
                            base = (di * k + dj) * c
                            for ic in range(c):
                                gx[b, ic, yy, xx] += cols[row, base + ic]
        return gx

    @njit(cache=True)
    def _pairwise_sq_dist_nb(x):
        n, d = x.shape
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for q in range(d):
                    t = x[i, q] - x[j, q]
                    acc += t * t
                out[i, j] = acc
                out[j, i] = acc
        return out


# ---------------------------------------------------------------- dispatch

def im2col(x, k, stride, pad):
    """``(n, c, h, w)`` -> ``(cols, ho, wo)`` with cols ``(n*ho*wo, k*k*c)``."""
    if _backend == "numba":
        return _im2col_nb(np.ascontiguousarray(x), k, stride, pad)
    return _im2col_np(x, k, stride, pad)


def col2im(cols, n, c, h, wd, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``(n, c, h, w)``."""
    if _backend == "numba":
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, wd, k, stride, pad)
    return _col2im_np(cols, n, c, h, wd, k, stride, pad)


def _rows_to_nchw(m, n, ho, wo):
    return np.ascontiguousarray(m.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def _nchw_to_rows(y):
    n, o = y.shape[:2]
    return np.ascontiguousarray(y.transpose(0, 2, 3, 1)).reshape(-1, o)


def conv2d(x, w, stride, pad):
    """Returns ``(out, cols)``; keep ``cols`` for :func:`conv2d_grad_weight`."""
    k = w.shape[2]
    cols, ho, wo = im2col(x, k, stride, pad)
    return _rows_to_nchw(cols @ _wmat(w).T, x.shape[0], ho, wo), cols


def conv2d_grad_input(gy, w, stride, pad, h, wd):
    """Adjoint of :func:`conv2d` in its input; also the transposed-conv forward."""
    c, k = w.shape[1], w.shape[2]
    return col2im(_nchw_to_rows(gy) @ _wmat(w), gy.shape[0], c, h, wd, k, stride, pad)


def conv2d_grad_weight(cols, gy, c, k):
    return _unwmat(_nchw_to_rows(gy).T @ cols, c, k)


def pairwise_sq_dist(x):
    if _backend == "numba":
        return _pairwise_sq_dist_nb(np.ascontiguousarray(x))
    return _pairwise_sq_dist_np(x)
