"""Frechet distance between Gaussian fits of feature sets, and pluggable extractors."""

from __future__ import annotations

import warnings
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ParameterError, ShapeError


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """tr((cov_a cov_b)^{1/2}) via the symmetric form sqrt(A) B sqrt(A)."""
    s = _sqrt_psd(cov_a)
    w = np.linalg.eigvalsh((s @ cov_b @ s + (s @ cov_b @ s).T) / 2.0)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -1e-8 * scale:
        raise np.linalg.LinAlgError("product of covariances is not PSD")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, eps: float = 1e-6) -> float:
    diff = np.atleast_1d(np.asarray(mu_a) - np.asarray(mu_b))
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    try:
        tr = trace_sqrt_product(cov_a, cov_b)
    except np.linalg.LinAlgError:
        warnings.warn(f"covariance square root failed; adding {eps} to the diagonal", RuntimeWarning)
        off = eps * np.eye(cov_a.shape[0])
        cov_a, cov_b = cov_a + off, cov_b + off
        tr = trace_sqrt_product(cov_a, cov_b)
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr)
    return max(val, 0.0)


def frechet_distance(feats_a, feats_b) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) over rows of two feature matrices."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature matrices must be [n, d] with equal d, got {a.shape} and {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ParameterError("each feature set needs at least 2 samples")
    return frechet_from_stats(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


# --------------------------------------------------------------------------- #
# Feature extractors


class FeatureExtractor(Protocol):
    name: str
    seed: int
    dim: int

    def __call__(self, volumes: np.ndarray, mode: str) -> np.ndarray: ...


class RandomConvExtractor:
    """Untrained convolutional projection with weights fixed by ``seed``.

    ``mode="3D"`` yields one vector per volume; ``mode="2D"`` one per axial slice.
    Features are channel-wise means and standard deviations of two ReLU
    stages, so ``dim = 2 * (c1 + c2)``.
    """

    name = "random_conv"

    def __init__(self, seed: int = 0, channels: tuple[int, int] = (8, 16)) -> None:
        self.seed = seed
        self.channels = channels
        self.dim = 2 * sum(channels)
        g = torch.Generator().manual_seed(seed)
        c1, c2 = channels
        self.w3 = (torch.randn(c1, 1, 3, 3, 3, generator=g, dtype=torch.float64) / 27**0.5,
                   torch.randn(c2, c1, 3, 3, 3, generator=g, dtype=torch.float64) / (27 * c1) ** 0.5)
        self.w2 = (torch.randn(c1, 1, 3, 3, generator=g, dtype=torch.float64) / 9**0.5,
                   torch.randn(c2, c1, 3, 3, generator=g, dtype=torch.float64) / (9 * c1) ** 0.5)

    def __call__(self, volumes: np.ndarray, mode: str = "3D") -> np.ndarray:
        x = torch.as_tensor(np.asarray(volumes, dtype=np.float64))
        if x.dim() == 3:
            x = x[None]
        if mode == "3D":
            conv, w = F.conv3d, self.w3
            x = x[:, None]
        elif mode == "2D":
            conv, w = F.conv2d, self.w2
            x = x.reshape(-1, 1, *x.shape[-2:])
        else:
            raise ParameterError(f"mode must be '2D' or '3D', got {mode!r}")
        dims = tuple(range(2, x.dim()))
        with torch.no_grad():
            h1 = torch.relu(conv(x - 0.5, w[0], padding=1))
            h2 = torch.relu(conv(h1, w[1], stride=2, padding=1))
            feats = [h1.mean(dims), h1.std(dims), h2.mean(dims), h2.std(dims)]
        return torch.cat(feats, dim=1).numpy()


_REGISTRY: dict[str, Callable[..., FeatureExtractor]] = {"random_conv": RandomConvExtractor}


def register_extractor(name: str, factory: Callable[..., FeatureExtractor]) -> None:
    _REGISTRY[name] = factory


def get_extractor(name: str = "random_conv", seed: int = 0) -> FeatureExtractor:
    if name not in _REGISTRY:
        raise ParameterError(f"unknown feature extractor {name!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[name](seed=seed)
