"""Windowed structural similarity for volumes."""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError, ShapeError
from ._kernels import box_sum3d

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _ssim_parts(a: np.ndarray, b: np.ndarray, window: int, data_range: float, k1: float, k2: float):
    n = float(window**3)
    mu_a = box_sum3d(a, window) / n
    mu_b = box_sum3d(b, window) / n
    var_a = box_sum3d(a * a, window) / n - mu_a**2
    var_b = box_sum3d(b * b, window) / n - mu_b**2
    cov = box_sum3d(a * b, window) / n - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def _prep(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim(a, b, window: int = 7, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all valid ``window``^3 cubes (uniform weights, population moments)."""
    a, b = _prep(a, b)
    if min(a.shape) < window:
        raise ParameterError(f"volume {a.shape} smaller than window {window}")
    lum, cs = _ssim_parts(a, b, window, data_range, k1, k2)
    return float(np.mean(lum * cs))


def _pool2(x: np.ndarray) -> np.ndarray:
    d, h, w = (s // 2 * 2 for s in x.shape)
    x = x[:d, :h, :w]
    return x.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def ms_ssim(a, b, scales: int = 5, window: int = 7, data_range: float = 1.0, weights=None,
            k1: float = 0.01, k2: float = 0.03) -> float:
    """Product over dyadic scales of contrast-structure terms, luminance at the coarsest.

    Negative per-scale terms are clamped to 0; weights are renormalized when
    fewer than five scales are used.
    """
    a, b = _prep(a, b)
    need = 2 ** (scales - 1) * window
    if min(a.shape) < need:
        raise ParameterError(f"{scales} scales with window {window} need min dimension >= {need}, got {min(a.shape)}")
    w = np.asarray(weights if weights is not None else MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
    if len(w) != scales:
        raise ParameterError("one weight per scale is required")
    w = w / w.sum()
    out = 1.0
    for j in range(scales):
        lum, cs = _ssim_parts(a, b, window, data_range, k1, k2)
        if j == scales - 1:
            val = float(np.mean(lum * cs))
        else:
            val = float(np.mean(cs))
            a, b = _pool2(a), _pool2(b)
        out *= max(val, 0.0) ** w[j]
    return float(out)


def max_scales(shape, window: int = 7, limit: int = 5) -> int:
    s = 1
    while s < limit and min(shape) >= 2**s * window:
        s += 1
    return s


def psnr(ref, test, data_range: float = 1.0) -> float:
    ref, test = _prep(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range**2 / mse)


def mae(ref, test) -> float:
    ref, test = _prep(ref, test)
    return float(np.mean(np.abs(ref - test)))
