"""Hot inner loops, each in a numba-compiled and a pure-numpy flavor.

The backend is picked once at import time from ``DEEPCOUNT_BACKEND``
(``numba`` or ``numpy``, default ``numba``).  When numba cannot be imported
the numpy path is used silently.  Both flavors stay importable under their
explicit names so tests and benchmarks can compare them side by side.

Array layout is channels-last throughout: ``(N, H, W, C)``.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_requested = os.environ.get("DEEPCOUNT_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"DEEPCOUNT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def im2col_numpy(xp, k1, k2, stride, out_h, out_w):
    """Gather sliding windows of a padded map into ``(N, Ho, Wo, K1, K2, C)``."""
    win = sliding_window_view(xp, (k1, k2), axis=(1, 2))  # N, H', W', C, K1, K2
    win = win[:, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im_numpy(cols, hp, wp, stride):
    """Scatter-add windows back onto a ``(N, hp, wp, C)`` canvas (adjoint of im2col)."""
    n, out_h, out_w, k1, k2, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    h_end = stride * (out_h - 1) + 1
    w_end = stride * (out_w - 1) + 1
    for i in range(k1):
        for j in range(k2):
            out[:, i : i + h_end : stride, j : j + w_end : stride, :] += cols[:, :, :, i, j, :]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def im2col_numba(xp, k1, k2, stride, out_h, out_w):
        n, _, _, c = xp.shape
        cols = np.empty((n, out_h, out_w, k1, k2, c), dtype=xp.dtype)
        for b in range(n):
            for oy in range(out_h):
                for ox in range(out_w):
                    y0 = oy * stride
                    x0 = ox * stride
                    for i in range(k1):
                        for j in range(k2):
                            for ch in range(c):
                                cols[b, oy, ox, i, j, ch] = xp[b, y0 + i, x0 + j, ch]
        return cols

    @njit(cache=True)
    def col2im_numba(cols, hp, wp, stride):
        n, out_h, out_w, k1, k2, c = cols.shape
        out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
        seg = k2 * c
        for b in range(n):
            for oy in range(out_h):
                for ox in range(out_w):
                    x0 = ox * stride
                    for i in range(k1):
                        src = cols[b, oy, ox, i]
                        y = oy * stride + i
                        for j in range(k2):
                            dst = out[b, y, x0 + j]
                            for ch in range(c):
                                dst[ch] += src[j, ch]
        return out

else:  # pragma: no cover
    im2col_numba = None
    col2im_numba = None


# ---------------------------------------------------------------------------
# Gaussian head splatting
# ---------------------------------------------------------------------------

def _axis_profile(center, extent, sigma, radius):
    """Bilinearly-split, truncated 1-D Gaussian along one axis.

    Pixel ``i`` covers ``[i, i+1)`` so its center sits at ``i + 0.5``.
    Returns the first pixel index and the (unnormalized) profile values.
    """
    u = center - 0.5
    base = int(np.floor(u))
    frac = u - base
    lo = max(base - radius, 0)
    hi = min(base + 1 + radius, extent - 1)
    idx = np.arange(lo, hi + 1)
    g0 = np.exp(-0.5 * ((idx - base) / sigma) ** 2)
    g1 = np.exp(-0.5 * ((idx - base - 1) / sigma) ** 2)
    g0[np.abs(idx - base) > radius] = 0.0
    g1[np.abs(idx - base - 1) > radius] = 0.0
    return lo, (1.0 - frac) * g0 + frac * g1


def splat_numpy(xs, ys, height, width, sigma, radius):
    out = np.zeros((height, width), dtype=np.float64)
    for x, y in zip(xs, ys):
        c0, px = _axis_profile(x, width, sigma, radius)
        r0, py = _axis_profile(y, height, sigma, radius)
        block = np.outer(py, px)
        block /= block.sum()
        out[r0 : r0 + py.size, c0 : c0 + px.size] += block
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _axis_profile_nb(center, extent, sigma, radius, buf):
        u = center - 0.5
        base = int(np.floor(u))
        frac = u - base
        lo = max(base - radius, 0)
        hi = min(base + 1 + radius, extent - 1)
        m = hi - lo + 1
        for t in range(m):
            i = lo + t
            d0 = i - base
            d1 = i - base - 1
            g0 = np.exp(-0.5 * (d0 / sigma) ** 2) if abs(d0) <= radius else 0.0
            g1 = np.exp(-0.5 * (d1 / sigma) ** 2) if abs(d1) <= radius else 0.0
            buf[t] = (1.0 - frac) * g0 + frac * g1
        return lo, m

    @njit(cache=True)
    def splat_numba(xs, ys, height, width, sigma, radius):
        out = np.zeros((height, width), dtype=np.float64)
        px = np.empty(2 * radius + 2, dtype=np.float64)
        py = np.empty(2 * radius + 2, dtype=np.float64)
        for h in range(xs.shape[0]):
            c0, mx = _axis_profile_nb(xs[h], width, sigma, radius, px)
            r0, my = _axis_profile_nb(ys[h], height, sigma, radius, py)
            total = 0.0
            for a in range(my):
                for b in range(mx):
                    total += py[a] * px[b]
            for a in range(my):
                for b in range(mx):
                    out[r0 + a, c0 + b] += py[a] * px[b] / total
        return out

else:  # pragma: no cover
    splat_numba = None


if BACKEND == "numba":
    im2col = im2col_numba
    col2im = col2im_numba
    splat = splat_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    splat = splat_numpy
