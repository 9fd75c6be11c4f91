"""Compiled inner loops for deformable sampling.

Corner geometry (clipped flat indices, validity, bilinear weights) is
computed in numpy; these loops only gather and scatter along it.
Arrays are laid out ``(N, C, K*L)`` for columns and ``(N, 4, K*L)`` for
corner data, corners ordered (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1).
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def gather_cols(xf, idx, wts, cols):
    n_, c_, _ = xf.shape
    m = idx.shape[2]
    for n in range(n_):
        for c in range(c_):
            plane = xf[n, c]
            out = cols[n, c]
            for j in range(m):
                out[j] = (wts[n, 0, j] * plane[idx[n, 0, j]] + wts[n, 1, j] * plane[idx[n, 1, j]]
                          + wts[n, 2, j] * plane[idx[n, 2, j]] + wts[n, 3, j] * plane[idx[n, 3, j]])


@numba.njit(cache=True, nogil=True)
def scatter_cols(dcols, idx, wts, dxf):
    n_, c_, m = dcols.shape
    for n in range(n_):
        for c in range(c_):
            g = dcols[n, c]
            dst = dxf[n, c]
            for j in range(m):
                gj = g[j]
                dst[idx[n, 0, j]] += gj * wts[n, 0, j]
                dst[idx[n, 1, j]] += gj * wts[n, 1, j]
                dst[idx[n, 2, j]] += gj * wts[n, 2, j]
                dst[idx[n, 3, j]] += gj * wts[n, 3, j]


@numba.njit(cache=True, nogil=True)
def offset_grads(dcols, xf, idx, valid, ly, lx, gy, gx):
    """Accumulate d/d(py) and d/d(px) summed over channels into ``gy``/``gx`` (N, K*L)."""
    n_, c_, m = dcols.shape
    for n in range(n_):
        for c in range(c_):
            g = dcols[n, c]
            plane = xf[n, c]
            for j in range(m):
                v00 = plane[idx[n, 0, j]] * valid[n, 0, j]
                v01 = plane[idx[n, 1, j]] * valid[n, 1, j]
                v10 = plane[idx[n, 2, j]] * valid[n, 2, j]
                v11 = plane[idx[n, 3, j]] * valid[n, 3, j]
                a, b = ly[n, j], lx[n, j]
                gy[n, j] += g[j] * ((1.0 - b) * (v10 - v00) + b * (v11 - v01))
                gx[n, j] += g[j] * ((1.0 - a) * (v01 - v00) + a * (v11 - v10))


def corner_geometry(py, px, h, w):
    """Clipped flat indices, validity masks and masked bilinear weights per corner.

    ``py``/``px`` have shape ``(N, K*L)``. Returns ``idx`` (int64), ``valid``
    and ``wts`` of shape ``(N, 4, K*L)`` plus the fractional parts.
    """
    y0f, x0f = np.floor(py), np.floor(px)
    ly, lx = py - y0f, px - x0f
    hy, hx = 1.0 - ly, 1.0 - lx
    y0, x0 = y0f.astype(np.int64), x0f.astype(np.int64)
    n, m = py.shape
    idx = np.empty((n, 4, m), dtype=np.int64)
    valid = np.empty((n, 4, m), dtype=py.dtype)
    wts = np.empty((n, 4, m), dtype=py.dtype)
    for j, (cy, cx, wt) in enumerate(((y0, x0, hy * hx), (y0, x0 + 1, hy * lx),
                                      (y0 + 1, x0, ly * hx), (y0 + 1, x0 + 1, ly * lx))):
        ok = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
        idx[:, j] = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
        valid[:, j] = ok
        wts[:, j] = wt * ok
    return idx, valid, wts, ly, lx
