"""Overlap and surface-distance measures between binary masks."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from scipy import ndimage

from ..errors import NumericError, ShapeError
from ._kernels import border_mask


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a)).astype(bool)
    b = np.asarray(getattr(b, "data", b)).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def directed_surface_distances(a, b, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance (mm) from every border voxel of ``a`` to the nearest border voxel of ``b``."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise NumericError("surface distances need two non-empty masks")
    ba, bb = border_mask(a), border_mask(b)
    dist = ndimage.distance_transform_edt(~bb, sampling=tuple(float(s) for s in spacing))
    return dist[ba]


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    return directed_surface_distances(a, b, spacing), directed_surface_distances(b, a, spacing)


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th percentiles (linear interpolation)."""
    d_ab, d_ba = surface_distances(a, b, spacing)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def assd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    d_ab, d_ba = surface_distances(a, b, spacing)
    return float(np.concatenate([d_ab, d_ba]).mean())


def skull_dist(real, gen) -> float:
    """Mean squared voxelwise difference over the full grid."""
    r = np.asarray(getattr(real, "data", real), dtype=np.float64)
    g = np.asarray(getattr(gen, "data", gen), dtype=np.float64)
    if r.shape != g.shape:
        raise ShapeError(f"shapes differ: {r.shape} vs {g.shape}")
    return float(np.mean((r - g) ** 2))
