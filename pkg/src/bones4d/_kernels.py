"""Fused numerical kernels for the warp/encoding hot paths.

Each kernel exists twice: a numba-compiled version (parallel over points,
serial over the reduction axis so results are bitwise deterministic) and a
pure-numpy fallback selected at import when numba is unavailable. Both sides
compute identical quantities in float64; `benchmarks/kernel_bench.py`
compares their speed.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

    prange = range


# -- positional encoding -----------------------------------------------------------


@njit(parallel=True, cache=True)
def _posenc_fwd_nb(x, freqs, identity, out):
    n, d = x.shape
    k = freqs.shape[0]
    base = d if identity else 0
    for i in prange(n):
        if identity:
            for j in range(d):
                out[i, j] = x[i, j]
        for o in range(k):
            for j in range(d):
                arg = x[i, j] * freqs[o]
                out[i, base + 2 * o * d + j] = np.sin(arg)
                out[i, base + (2 * o + 1) * d + j] = np.cos(arg)


@njit(parallel=True, cache=True)
def _posenc_bwd_nb(g, out, freqs, identity, gx):
    n, d = gx.shape
    k = freqs.shape[0]
    base = d if identity else 0
    for i in prange(n):
        for j in range(d):
            acc = g[i, j] if identity else 0.0
            for o in range(k):
                s = out[i, base + 2 * o * d + j]
                c = out[i, base + (2 * o + 1) * d + j]
                acc += freqs[o] * (g[i, base + 2 * o * d + j] * c
                                   - g[i, base + (2 * o + 1) * d + j] * s)
            gx[i, j] = acc


def posenc_forward(x: np.ndarray, freqs: np.ndarray, identity: bool) -> np.ndarray:
    n, d = x.shape
    out = np.empty((n, d * ((1 if identity else 0) + 2 * len(freqs))))
    if HAVE_NUMBA:
        _posenc_fwd_nb(x, freqs, identity, out)
        return out
    base = 0
    if identity:
        out[:, :d] = x
        base = d
    args = x[:, None, :] * freqs[:, None]
    blocks = out[:, base:].reshape(n, len(freqs), 2, d)
    np.sin(args, out=blocks[:, :, 0, :])
    np.cos(args, out=blocks[:, :, 1, :])
    return out


def posenc_backward(g: np.ndarray, out: np.ndarray, freqs: np.ndarray,
                    identity: bool, dim: int) -> np.ndarray:
    if HAVE_NUMBA:
        gx = np.empty((g.shape[0], dim))
        _posenc_bwd_nb(g, out, freqs, identity, gx)
        return gx
    base = dim if identity else 0
    k = len(freqs)
    gx = g[:, :dim].copy() if identity else np.zeros((g.shape[0], dim))
    sincos = out[:, base:].reshape(-1, k, 2, dim)
    g_sincos = g[:, base:].reshape(-1, k, 2, dim)
    gx += np.einsum("k,nkd->nd", freqs,
                    g_sincos[:, :, 0, :] * sincos[:, :, 1, :]
                    - g_sincos[:, :, 1, :] * sincos[:, :, 0, :])
    return gx


# -- squared Mahalanobis distance to packed bones -----------------------------------
#
# md[f,s,b] = sum_i ( sum_j u[f,b,i,j] x[f,s,j] - v[f,b,i] )^2
# where u folds orientation and inverse scales and v = u @ mu. The residual is
# recomputed in the backward kernels instead of materializing [F,S,B,3].


@njit(parallel=True, cache=True)
def _mahal_fwd_nb(x, u, v, md):
    f, s, _ = x.shape
    b = u.shape[1]
    for fs in prange(f * s):
        fi = fs // s
        si = fs % s
        x0, x1, x2 = x[fi, si, 0], x[fi, si, 1], x[fi, si, 2]
        for bi in range(b):
            acc = 0.0
            for i in range(3):
                r = (u[fi, bi, i, 0] * x0 + u[fi, bi, i, 1] * x1
                     + u[fi, bi, i, 2] * x2 - v[fi, bi, i])
                acc += r * r
            md[fi, si, bi] = acc


@njit(parallel=True, cache=True)
def _mahal_bwd_x_nb(g, x, u, v, gx):
    f, s, _ = x.shape
    b = u.shape[1]
    for fs in prange(f * s):
        fi = fs // s
        si = fs % s
        x0, x1, x2 = x[fi, si, 0], x[fi, si, 1], x[fi, si, 2]
        a0 = a1 = a2 = 0.0
        for bi in range(b):
            gg = g[fi, si, bi]
            for i in range(3):
                r = (u[fi, bi, i, 0] * x0 + u[fi, bi, i, 1] * x1
                     + u[fi, bi, i, 2] * x2 - v[fi, bi, i])
                c = 2.0 * gg * r
                a0 += c * u[fi, bi, i, 0]
                a1 += c * u[fi, bi, i, 1]
                a2 += c * u[fi, bi, i, 2]
        gx[fi, si, 0] = a0
        gx[fi, si, 1] = a1
        gx[fi, si, 2] = a2


@njit(parallel=True, cache=True)
def _mahal_bwd_uv_nb(g, x, u, v, gu, gv):
    f, s, _ = x.shape
    b = u.shape[1]
    for fb in prange(f * b):
        fi = fb // b
        bi = fb % b
        for si in range(s):  # serial per (f, b): deterministic accumulation
            x0, x1, x2 = x[fi, si, 0], x[fi, si, 1], x[fi, si, 2]
            gg = g[fi, si, bi]
            for i in range(3):
                r = (u[fi, bi, i, 0] * x0 + u[fi, bi, i, 1] * x1
                     + u[fi, bi, i, 2] * x2 - v[fi, bi, i])
                c = 2.0 * gg * r
                gu[fi, bi, i, 0] += c * x0
                gu[fi, bi, i, 1] += c * x1
                gu[fi, bi, i, 2] += c * x2
                gv[fi, bi, i] -= c


def _residual_np(x, u, v):
    ux = np.einsum("fbij,fsj->fsbi", u, x, optimize=True)
    return ux - v[:, None]


def mahal_forward(x, u, v):
    f, s = x.shape[0], x.shape[1]
    md = np.empty((f, s, u.shape[1]))
    if HAVE_NUMBA:
        _mahal_fwd_nb(x, u, v, md)
        return md
    r = _residual_np(x, u, v)
    return (r * r).sum(axis=-1)


def mahal_backward_x(g, x, u, v):
    if HAVE_NUMBA:
        gx = np.empty_like(x)
        _mahal_bwd_x_nb(g, x, u, v, gx)
        return gx
    r = _residual_np(x, u, v)
    return np.einsum("fsb,fsbi,fbij->fsj", 2.0 * g, r, u, optimize=True)


def mahal_backward_uv(g, x, u, v):
    if HAVE_NUMBA:
        gu = np.zeros_like(u)
        gv = np.zeros_like(v)
        _mahal_bwd_uv_nb(g, x, u, v, gu, gv)
        return gu, gv
    r = _residual_np(x, u, v)
    c = 2.0 * g[..., None] * r  # [f,s,b,i]
    gu = np.einsum("fsbi,fsj->fbij", c, x, optimize=True)
    gv = -c.sum(axis=1)
    return gu, gv


# -- blended rigid transforms --------------------------------------------------------
#
# y[f,s,:] = sum_b w[f,s,b] (a[f,b] @ x[f,s] + t[f,b])


@njit(parallel=True, cache=True)
def _blend_fwd_nb(w, a, t, x, y):
    f, s, _ = x.shape
    b = a.shape[1]
    for fs in prange(f * s):
        fi = fs // s
        si = fs % s
        x0, x1, x2 = x[fi, si, 0], x[fi, si, 1], x[fi, si, 2]
        y0 = y1 = y2 = 0.0
        for bi in range(b):
            ww = w[fi, si, bi]
            y0 += ww * (a[fi, bi, 0, 0] * x0 + a[fi, bi, 0, 1] * x1
                        + a[fi, bi, 0, 2] * x2 + t[fi, bi, 0])
            y1 += ww * (a[fi, bi, 1, 0] * x0 + a[fi, bi, 1, 1] * x1
                        + a[fi, bi, 1, 2] * x2 + t[fi, bi, 1])
            y2 += ww * (a[fi, bi, 2, 0] * x0 + a[fi, bi, 2, 1] * x1
                        + a[fi, bi, 2, 2] * x2 + t[fi, bi, 2])
        y[fi, si, 0] = y0
        y[fi, si, 1] = y1
        y[fi, si, 2] = y2


@njit(parallel=True, cache=True)
def _blend_bwd_wx_nb(g, w, a, t, x, gw, gx):
    f, s, _ = x.shape
    b = a.shape[1]
    for fs in prange(f * s):
        fi = fs // s
        si = fs % s
        x0, x1, x2 = x[fi, si, 0], x[fi, si, 1], x[fi, si, 2]
        g0, g1, g2 = g[fi, si, 0], g[fi, si, 1], g[fi, si, 2]
        a0 = a1 = a2 = 0.0
        for bi in range(b):
            r0 = (a[fi, bi, 0, 0] * x0 + a[fi, bi, 0, 1] * x1
                  + a[fi, bi, 0, 2] * x2 + t[fi, bi, 0])
            r1 = (a[fi, bi, 1, 0] * x0 + a[fi, bi, 1, 1] * x1
                  + a[fi, bi, 1, 2] * x2 + t[fi, bi, 1])
            r2 = (a[fi, bi, 2, 0] * x0 + a[fi, bi, 2, 1] * x1
                  + a[fi, bi, 2, 2] * x2 + t[fi, bi, 2])
            gw[fi, si, bi] = g0 * r0 + g1 * r1 + g2 * r2
            ww = w[fi, si, bi]
            a0 += ww * (g0 * a[fi, bi, 0, 0] + g1 * a[fi, bi, 1, 0]
                        + g2 * a[fi, bi, 2, 0])
            a1 += ww * (g0 * a[fi, bi, 0, 1] + g1 * a[fi, bi, 1, 1]
                        + g2 * a[fi, bi, 2, 1])
            a2 += ww * (g0 * a[fi, bi, 0, 2] + g1 * a[fi, bi, 1, 2]
                        + g2 * a[fi, bi, 2, 2])
        gx[fi, si, 0] = a0
        gx[fi, si, 1] = a1
        gx[fi, si, 2] = a2


@njit(parallel=True, cache=True)
def _blend_bwd_at_nb(g, w, x, ga, gt):
    f, s, _ = x.shape
    b = ga.shape[1]
    for fb in prange(f * b):
        fi = fb // b
        bi = fb % b
        for si in range(s):  # serial per (f, b): deterministic accumulation
            gw_ = w[fi, si, bi]
            x0, x1, x2 = x[fi, si, 0], x[fi, si, 1], x[fi, si, 2]
            for i in range(3):
                gi = g[fi, si, i] * gw_
                ga[fi, bi, i, 0] += gi * x0
                ga[fi, bi, i, 1] += gi * x1
                ga[fi, bi, i, 2] += gi * x2
                gt[fi, bi, i] += gi


def blend_forward(w, a, t, x):
    if HAVE_NUMBA:
        y = np.empty_like(x)
        _blend_fwd_nb(w, a, t, x, y)
        return y
    xr = np.einsum("fbij,fsj->fsbi", a, x, optimize=True) + t[:, None]
    return np.einsum("fsb,fsbi->fsi", w, xr, optimize=True)


def blend_backward_wx(g, w, a, t, x):
    if HAVE_NUMBA:
        gw = np.empty_like(w)
        gx = np.empty_like(x)
        _blend_bwd_wx_nb(g, w, a, t, x, gw, gx)
        return gw, gx
    xr = np.einsum("fbij,fsj->fsbi", a, x, optimize=True) + t[:, None]
    gw = np.einsum("fsi,fsbi->fsb", g, xr, optimize=True)
    gx = np.einsum("fsb,fbij,fsi->fsj", w, a, g, optimize=True)
    return gw, gx


def blend_backward_at(g, w, x):
    b = w.shape[-1]
    if HAVE_NUMBA:
        ga = np.zeros((w.shape[0], b, 3, 3))
        gt = np.zeros((w.shape[0], b, 3))
        _blend_bwd_at_nb(g, w, x, ga, gt)
        return ga, gt
    c = np.einsum("fsb,fsi->fsbi", w, g, optimize=True)
    ga = np.einsum("fsbi,fsj->fbij", c, x, optimize=True)
    gt = c.sum(axis=1)
    return ga, gt
