"""Hot numeric kernels with selectable backends.

The 2D convolution forward/backward passes dominate runtime during training,
so they come in two interchangeable implementations:

* ``numba``: ``@njit`` loop kernels (default when numba imports). Threads
  split only independent output slices and every element accumulates in a
  fixed serial order, so results are bit-stable across thread counts.
* ``numpy``: pure-numpy fallback; window views reshaped into matrix
  products.

Select with the ``GAITGCN_BACKEND`` environment variable or ``use_backend()``.
Both backends are deterministic; they may differ in the last float bits only
(different summation order). ``benchmarks/bench_kernels.py`` compares them.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

ENV_VAR = "GAITGCN_BACKEND"

_ACTIVE = None
_IMPL = {}


# ---------------------------------------------------------------------------
# numpy implementations

def _windows(xp, kh, kw, sh, sw, dh, dw, ho, wo):
    # read-only sliding-window view over the padded input
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    shape = (n, c, kh, kw, ho, wo)
    strides = (s0, s1, s2 * dh, s3 * dw, s2 * sh, s3 * sw)
    return as_strided(xp, shape=shape, strides=strides, writeable=False)


def _columns(xp, kh, kw, sh, sw, dh, dw, ho, wo):
    # materialized (n, c*kh*kw, ho*wo) patch matrix
    n, c = xp.shape[:2]
    win = _windows(xp, kh, kw, sh, sw, dh, dw, ho, wo)
    return np.ascontiguousarray(win).reshape(n, c * kh * kw, ho * wo)


def _np_conv2d_forward(xp, w, stride, dilation, out):
    sh, sw = stride
    dh, dw = dilation
    f, _, kh, kw = w.shape
    n, _, ho, wo = out.shape
    cols = _columns(xp, kh, kw, sh, sw, dh, dw, ho, wo)
    np.matmul(w.reshape(f, -1), cols, out=out.reshape(n, f, ho * wo))


def _np_conv2d_grad_w(xp, gy, stride, dilation, gw):
    sh, sw = stride
    dh, dw = dilation
    f, _, kh, kw = gw.shape
    n, _, ho, wo = gy.shape
    cols = _columns(xp, kh, kw, sh, sw, dh, dw, ho, wo)
    prod = np.matmul(gy.reshape(n, f, ho * wo), cols.transpose(0, 2, 1))
    gw[...] = prod.sum(axis=0).reshape(gw.shape)


def _np_conv2d_grad_x(gxp, w, gy, stride, dilation):
    sh, sw = stride
    dh, dw = dilation
    f, c, kh, kw = w.shape
    n, _, ho, wo = gy.shape
    prod = np.matmul(w.reshape(f, -1).T, gy.reshape(n, f, ho * wo))
    contrib = prod.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i * dh : i * dh + sh * ho : sh,
                j * dw : j * dw + sw * wo : sw] += contrib[:, :, i, j]


# ---------------------------------------------------------------------------
# numba implementations (compiled lazily on first backend activation)

def _build_numba_impl():
    from numba import njit, prange

    # Output arrays arrive pre-zeroed; kernels only accumulate. prange
    # splits axes whose slices never share a destination element, and each
    # element's accumulation order is a fixed serial loop, so results do
    # not depend on the thread count.

    @njit(cache=True, parallel=True)
    def conv2d_forward(xp, w, sh, sw, dh, dw, out):
        n_n, n_f, n_ho, n_wo = out.shape
        n_c, n_kh, n_kw = w.shape[1], w.shape[2], w.shape[3]
        for n in range(n_n):
            for f in prange(n_f):
                for c in range(n_c):
                    for i in range(n_kh):
                        for j in range(n_kw):
                            wv = w[f, c, i, j]
                            jb = j * dw
                            for ho in range(n_ho):
                                ih = ho * sh + i * dh
                                for wo in range(n_wo):
                                    out[n, f, ho, wo] += wv * xp[n, c, ih, wo * sw + jb]

    @njit(cache=True, parallel=True)
    def conv2d_grad_w(xp, gy, sh, sw, dh, dw, gw):
        n_f, n_c, n_kh, n_kw = gw.shape
        n_n, _, n_ho, n_wo = gy.shape
        for f in prange(n_f):
            for c in range(n_c):
                for i in range(n_kh):
                    for j in range(n_kw):
                        jb = j * dw
                        for n in range(n_n):
                            for ho in range(n_ho):
                                ih = ho * sh + i * dh
                                for wo in range(n_wo):
                                    gw[f, c, i, j] += gy[n, f, ho, wo] * xp[n, c, ih, wo * sw + jb]

    @njit(cache=True, parallel=True)
    def conv2d_grad_x(gxp, w, gy, sh, sw, dh, dw):
        n_n, n_f, n_ho, n_wo = gy.shape
        n_c, n_kh, n_kw = w.shape[1], w.shape[2], w.shape[3]
        for n in range(n_n):
            for c in prange(n_c):
                for f in range(n_f):
                    for i in range(n_kh):
                        for j in range(n_kw):
                            wv = w[f, c, i, j]
                            jb = j * dw
                            for ho in range(n_ho):
                                ih = ho * sh + i * dh
                                for wo in range(n_wo):
                                    gxp[n, c, ih, wo * sw + jb] += wv * gy[n, f, ho, wo]

    def forward(xp, w, stride, dilation, out):
        conv2d_forward(xp, w, stride[0], stride[1], dilation[0], dilation[1], out)

    def grad_w(xp, gy, stride, dilation, gw):
        conv2d_grad_w(xp, gy, stride[0], stride[1], dilation[0], dilation[1], gw)

    def grad_x(gxp, w, gy, stride, dilation):
        conv2d_grad_x(gxp, w, gy, stride[0], stride[1], dilation[0], dilation[1])

    return {"forward": forward, "grad_w": grad_w, "grad_x": grad_x}


_NUMPY_IMPL = {
    "forward": _np_conv2d_forward,
    "grad_w": _np_conv2d_grad_w,
    "grad_x": _np_conv2d_grad_x,
}


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def available_backends() -> list[str]:
    names = ["numpy"]
    if numba_available():
        names.insert(0, "numba")
    return names


def use_backend(name: str) -> None:
    """Switch the active kernel backend ("numba" or "numpy")."""
    global _ACTIVE, _IMPL
    if name == "numpy":
        _IMPL = _NUMPY_IMPL
    elif name == "numba":
        if not numba_available():
            raise RuntimeError("numba backend requested but numba is not importable")
        _IMPL = _build_numba_impl()
    else:
        raise ValueError(f"unknown kernel backend {name!r}; choose 'numba' or 'numpy'")
    _ACTIVE = name


def active_backend() -> str:
    _ensure_init()
    return _ACTIVE


def _ensure_init():
    if _ACTIVE is None:
        requested = os.environ.get(ENV_VAR, "").strip().lower()
        if requested:
            use_backend(requested)
        else:
            use_backend("numba" if numba_available() else "numpy")


# ---------------------------------------------------------------------------
# public conv2d entry points (backend independent padding/shape handling)

def conv2d_output_shape(x_shape, w_shape, stride, dilation, padding):
    n, _, h, w = x_shape
    f, _, kh, kw = w_shape
    sh, sw = stride
    dh, dw = dilation
    ph, pw = padding
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    return (n, f, ho, wo)


def _pad(x, padding):
    ph, pw = padding
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x, w, stride, dilation, padding):
    """Dense 2D convolution of (N,C,H,W) with (F,C,KH,KW) filters."""
    _ensure_init()
    out = np.zeros(conv2d_output_shape(x.shape, w.shape, stride, dilation, padding),
                   dtype=x.dtype)
    _IMPL["forward"](_pad(x, padding), np.ascontiguousarray(w), stride, dilation, out)
    return out


def conv2d_backward(x, w, gy, stride, dilation, padding):
    """Gradients of conv2d_forward wrt input and weight."""
    _ensure_init()
    xp = _pad(x, padding)
    gy = np.ascontiguousarray(gy)
    gw = np.zeros_like(w)
    _IMPL["grad_w"](xp, gy, stride, dilation, gw)
    gxp = np.zeros_like(xp)
    _IMPL["grad_x"](gxp, np.ascontiguousarray(w), gy, stride, dilation)
    ph, pw = padding
    h, w_ = x.shape[2], x.shape[3]
    gx = gxp[:, :, ph : ph + h, pw : pw + w_]
    return np.ascontiguousarray(gx), gw
