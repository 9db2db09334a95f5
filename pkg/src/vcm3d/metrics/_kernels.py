"""Hot voxel loops for the metrics: numba-compiled, with a pure-numpy fallback.

Set ``VCM3D_DISABLE_NUMBA=1`` (or run without numba installed) to use the
numpy path. Border masks match exactly; box sums agree to floating-point
rounding since the two paths accumulate in a different order.
``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("VCM3D_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - depends on environment
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE


# --------------------------------------------------------------------------- #
# numpy implementations


def border_mask_numpy(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background neighbour.

    Voxels outside the grid count as background.
    """
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return m & ~interior


def box_sum3d_numpy(x: np.ndarray, w: int) -> np.ndarray:
    """Sum over every ``w``^3 window (valid mode) via a summed-volume table."""
    x = np.asarray(x, dtype=np.float64)
    s = np.zeros(tuple(n + 1 for n in x.shape))
    s[1:, 1:, 1:] = x.cumsum(0).cumsum(1).cumsum(2)
    return (
        s[w:, w:, w:] - s[:-w, w:, w:] - s[w:, :-w, w:] - s[w:, w:, :-w]
        + s[:-w, :-w, w:] + s[:-w, w:, :-w] + s[w:, :-w, :-w] - s[:-w, :-w, :-w]
    )


# --------------------------------------------------------------------------- #
# numba implementations

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _border_mask_nb(m):
        D, H, W = m.shape
        out = np.zeros((D, H, W), dtype=np.bool_)
        for i in range(D):
            for j in range(H):
                for k in range(W):
                    if not m[i, j, k]:
                        continue
                    if (i == 0 or i == D - 1 or j == 0 or j == H - 1 or k == 0 or k == W - 1
                            or not m[i - 1, j, k] or not m[i + 1, j, k]
                            or not m[i, j - 1, k] or not m[i, j + 1, k]
                            or not m[i, j, k - 1] or not m[i, j, k + 1]):
                        out[i, j, k] = True
        return out

    @njit(cache=True)
    def _box_sum3d_nb(x, w):
        D, H, W = x.shape
        s = np.zeros((D + 1, H + 1, W + 1))
        for i in range(D):
            for j in range(H):
                for k in range(W):
                    s[i + 1, j + 1, k + 1] = (x[i, j, k] + s[i, j + 1, k + 1] + s[i + 1, j, k + 1] + s[i + 1, j + 1, k]
                                              - s[i, j, k + 1] - s[i, j + 1, k] - s[i + 1, j, k] + s[i, j, k])
        od, oh, ow = D - w + 1, H - w + 1, W - w + 1
        out = np.empty((od, oh, ow))
        for i in range(od):
            for j in range(oh):
                for k in range(ow):
                    a, b, c = i + w, j + w, k + w
                    out[i, j, k] = (s[a, b, c] - s[i, b, c] - s[a, j, c] - s[a, b, k]
                                    + s[i, j, c] + s[i, b, k] + s[a, j, k] - s[i, j, k])
        return out


def border_mask(mask: np.ndarray) -> np.ndarray:
    m = np.ascontiguousarray(mask, dtype=bool)
    if USE_NUMBA:
        return _border_mask_nb(m)
    return border_mask_numpy(m)


def box_sum3d(x: np.ndarray, w: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if min(x.shape) < w:
        raise ValueError(f"window {w} larger than volume {x.shape}")
    if USE_NUMBA:
        return _box_sum3d_nb(x, int(w))
    return box_sum3d_numpy(x, w)
