"""Generation pipelines: unconditional, VCM-conditioned and axial super-resolution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
from scipy import ndimage

from .backbone import Backbone
from .data import degrade_axial
from .errors import ConfigError, ShapeError
from .schedule import SamplerConfig, sample_loop
from .vcm import VCMNetwork, modulate
from .volio import BinaryMask, Volume3D


@dataclass
class GenerationRequest:
    backbone: Backbone
    vcm: VCMNetwork | None = None
    conditions: dict[str, torch.Tensor] = field(default_factory=dict)
    scalars: torch.Tensor | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    n: int = 1
    lr_factors: tuple[int, ...] = (1, 4, 8)
    z_init: torch.Tensor | None = None

    def covariates(self) -> torch.Tensor:
        if self.scalars is None:
            return torch.ones(self.n, self.backbone.cfg["n_scalars"])
        s = torch.as_tensor(self.scalars, dtype=torch.float32)
        return s.expand(self.n, -1) if s.dim() == 1 or s.shape[0] == 1 else s


def _to_volumes(x: torch.Tensor, prefix: str = "sample") -> list[Volume3D]:
    x = x.clamp(0.0, 1.0).detach().cpu().numpy()
    return [Volume3D(x[i, 0].astype(np.float32), name=f"{prefix}_{i:03d}") for i in range(x.shape[0])]


def _sample(req: GenerationRequest, conditional: bool) -> torch.Tensor:
    bb = req.backbone
    bb.eval()
    scalars = req.covariates()
    if scalars.shape[0] != req.n:
        raise ShapeError(f"{scalars.shape[0]} covariate rows for n={req.n}")
    shape = (req.n, *bb.latent_shape)
    conds, keep = {}, None
    if conditional:
        if req.vcm is None:
            raise ConfigError("conditional sampling needs a VCM")
        vcm = req.vcm
        vcm.eval()
        unknown = set(req.conditions) - set(vcm.modalities)
        if unknown:
            raise ConfigError(f"modalities {sorted(unknown)} not in trained list {vcm.modalities}")
        for m, y in req.conditions.items():
            y = torch.as_tensor(y, dtype=torch.float32)
            if y.dim() == 3:
                y = y[None, None]
            elif y.dim() == 4:
                y = y[:, None]
            if tuple(y.shape[-3:]) != tuple(bb.volume_shape):
                raise ShapeError(f"condition {m!r} has spatial shape {tuple(y.shape[-3:])}, expected {bb.volume_shape}")
            conds[m] = y.expand(req.n, -1, -1, -1, -1) if y.shape[0] == 1 else y
            if conds[m].shape[0] != req.n:
                raise ShapeError(f"condition {m!r} has {conds[m].shape[0]} entries for n={req.n}")
        keep = torch.tensor([[m in conds for m in vcm.modalities]] * req.n, dtype=torch.bool)

    def predictor(z: torch.Tensor, t: int) -> torch.Tensor:
        eps = bb.predict_noise(z, scalars, t)
        if not conditional:
            return eps
        gamma, beta = req.vcm(z, eps, conds, t, keep)
        return modulate(eps, gamma, beta)

    with torch.no_grad():
        z0 = sample_loop(predictor, shape, req.sampler, bb.schedule, req.seed, req.z_init)
        return bb.from_latent(z0)


def sample_unconditional(req: GenerationRequest) -> list[Volume3D]:
    return _to_volumes(_sample(req, conditional=False))


def sample_conditional(req: GenerationRequest) -> list[Volume3D]:
    """Each reverse step uses eps' = eps * (1 + gamma) + beta with all supplied modalities kept."""
    return _to_volumes(_sample(req, conditional=True))


def lr_condition(lr: np.ndarray | torch.Tensor, factor: int, target_depth: int) -> torch.Tensor:
    """Nearest-neighbour axial re-expansion of a low-resolution stack to the full grid."""
    x = torch.as_tensor(np.asarray(lr), dtype=torch.float32)
    if x.dim() == 3:
        x = x[None, None]
    up = x.repeat_interleave(factor, dim=2)
    if up.shape[2] < target_depth:
        up = torch.cat([up, up[:, :, -1:].expand(-1, -1, target_depth - up.shape[2], -1, -1)], dim=2)
    return up[:, :, :target_depth]


def super_resolve(lr: Volume3D | list[Volume3D], factor: int, req: GenerationRequest) -> list[Volume3D]:
    """Generate full-resolution volumes conditioned on low-resolution axial stacks."""
    if req.vcm is None or "lr" not in req.vcm.modalities:
        raise ConfigError("super-resolution needs a VCM trained with the 'lr' modality")
    if factor not in req.lr_factors:
        raise ConfigError(f"factor {factor} not in trained family {list(req.lr_factors)}")
    lrs = lr if isinstance(lr, list) else [lr]
    depth = req.backbone.volume_shape[0]
    cond = torch.cat([lr_condition(v.data, factor, depth) for v in lrs])
    sub = GenerationRequest(req.backbone, req.vcm, {"lr": cond}, req.scalars, req.sampler, req.seed, len(lrs), req.lr_factors, req.z_init)
    return sample_conditional(sub)


def nearest_upsample_baseline(hr: torch.Tensor, factor: int) -> torch.Tensor:
    return degrade_axial(hr, factor)


def extract_lv_mask(image: np.ndarray, threshold: float) -> BinaryMask:
    """Dark voxels (< ``threshold``) that are not connected to the grid border.

    The ventricle is the only dark region enclosed by brighter tissue;
    background darkness always touches the border.
    """
    dark = np.asarray(image) < threshold
    labels, n = ndimage.label(dark)
    if n == 0:
        return BinaryMask(np.zeros(dark.shape, np.uint8))
    border = np.zeros_like(dark)
    border[[0, -1], :, :] = border[:, [0, -1], :] = border[:, :, [0, -1]] = True
    touching = np.unique(labels[border & dark])
    inner = dark & ~np.isin(labels, touching)
    return BinaryMask(inner.astype(np.uint8))


def skull_region(image: np.ndarray, brain_mask: np.ndarray) -> np.ndarray:
    """Intensity outside the (reference) brain region."""
    return np.asarray(image) * (1.0 - np.asarray(brain_mask, dtype=np.float32))
