"""Closed-form diffusion arithmetic: linear beta schedule, noising, x0 estimate, DDIM steps.

Timesteps are 1-based (``1..T``); ``t = 0`` denotes clean data with
``alpha_bar_0 = 1``. Tables are float64; arithmetic on latents works for both
numpy arrays and torch tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import NumericError, ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])

    def sigma(self, t: int, t_prev: int, eta: float) -> float:
        """DDIM noise scale; ``eta = 1`` gives the DDPM posterior std for consecutive steps."""
        ab_t = self.alpha_bar_at(t)
        ab_prev = self.alpha_bar_at(t_prev)
        ratio = 1.0 - ab_t / ab_prev
        if ratio < 0.0 or ab_t >= 1.0:
            raise NumericError(f"alpha_bar must decrease from t={t_prev} to t={t}")
        return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(ratio)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def linear_beta_schedule(T: int = 1000, beta_start: float = 0.0015, beta_end: float = 0.0205) -> NoiseSchedule:
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


@dataclass(frozen=True)
class SamplerConfig:
    eta: float = 0.0
    num_inference_steps: int = 200

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError("eta must lie in [0, 1]")
        if self.num_inference_steps < 1:
            raise ParameterError("num_inference_steps must be >= 1")


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z0, t: int, eps, s: NoiseSchedule):
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    _check_shapes(z0, eps)
    ab = s.alpha_bar_at(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def forward_noise_batch(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Per-sample version of :func:`forward_noise` for a batch of timesteps."""
    _check_shapes(z0, eps)
    ab = torch.as_tensor(s.alpha_bar[t.cpu().numpy() - 1], dtype=z0.dtype, device=z0.device)
    ab = ab.view(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def predict_x0(zt, eps_t, t: int, s: NoiseSchedule):
    """Denoised estimate (z_t - sqrt(1 - abar_t) eps_t) / sqrt(abar_t)."""
    _check_shapes(zt, eps_t)
    ab = s.alpha_bar_at(t)
    if ab <= 0.0:
        raise NumericError("alpha_bar must be positive")
    return (zt - math.sqrt(1.0 - ab) * eps_t) / math.sqrt(ab)


def ddim_step(zt, eps_t, t: int, t_prev: int, cfg: SamplerConfig, s: NoiseSchedule, fresh_noise=None):
    """One reverse step from ``t`` to ``t_prev``.

    The stochastic term uses ``fresh_noise`` (required when ``cfg.eta > 0``).
    """
    if not t_prev < t:
        raise ParameterError("t_prev must be < t")
    ab_prev = s.alpha_bar_at(t_prev)
    sigma = s.sigma(t, t_prev, cfg.eta)
    dir_var = 1.0 - ab_prev - sigma**2
    if dir_var < -1e-12:
        raise NumericError(f"sigma^2={sigma**2:.3e} exceeds 1 - abar_prev={1.0 - ab_prev:.3e}")
    x0 = predict_x0(zt, eps_t, t, s)
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(dir_var, 0.0)) * eps_t
    if sigma > 0.0:
        if fresh_noise is None:
            raise ParameterError("eta > 0 requires fresh_noise")
        _check_shapes(zt, fresh_noise)
        out = out + sigma * fresh_noise
    return out


def inference_timesteps(T: int, num_steps: int) -> list[int]:
    """Uniformly strided descending timesteps ending above 0; the last step goes to t=0."""
    if not 1 <= num_steps <= T:
        raise ParameterError(f"num_inference_steps must be in [1, {T}]")
    ts = [int(round(T * (num_steps - i) / num_steps)) for i in range(num_steps)]
    return ts


NoisePredictorFn = Callable[[torch.Tensor, int], torch.Tensor]


def sample_loop(
    noise_predictor: NoisePredictorFn,
    shape: tuple[int, ...],
    cfg: SamplerConfig,
    s: NoiseSchedule,
    seed: int = 0,
    z_init: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run DDIM from pure noise at t=T down to t=0.

    Initial and fresh noise come from ``np.random.default_rng(seed)``;
    ``z_init`` overrides the initial draw (shared-noise comparisons).
    """
    if cfg.num_inference_steps > s.T:
        raise ParameterError("num_inference_steps exceeds T")
    rng = np.random.default_rng(seed)
    if z_init is None:
        z = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    else:
        z = z_init.clone().to(dtype)
        if tuple(z.shape) != tuple(shape):
            raise ShapeError(f"z_init shape {tuple(z.shape)} != {tuple(shape)}")
    ts = inference_timesteps(s.T, cfg.num_inference_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = noise_predictor(z, t)
        if tuple(eps.shape) != tuple(z.shape):
            raise ShapeError(f"predictor returned {tuple(eps.shape)}, expected {tuple(z.shape)}")
        fresh = None
        if cfg.eta > 0.0:
            fresh = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
        z = ddim_step(z, eps, t, t_prev, cfg, s, fresh)
    return z
