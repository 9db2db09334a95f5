"""In-memory tensors for a phantom dataset directory."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .volio import PhantomParams, expected_lv_fraction, list_samples, normalize_minmax, read_sample


def covariates(meta: dict, size: int) -> np.ndarray:
    """Scalar covariates ``[lv_fraction, brain_fraction]`` scaled to be O(1)."""
    p = PhantomParams.from_dict(meta.get("phantom", {}))
    brain_nominal = 4.0 / 3.0 * math.pi * np.prod(np.asarray(p.brain_radius) * size / 2.0) / size**3
    return np.array([meta["lv_fraction"] / expected_lv_fraction(size, p), meta["brain_fraction"] / brain_nominal], dtype=np.float32)


@dataclass
class PhantomTensors:
    ids: list[str]
    images: torch.Tensor  # [N, 1, D, H, W] in [0, 1]
    lv_mask: torch.Tensor
    brain_mask: torch.Tensor
    skull: torch.Tensor
    scalars: torch.Tensor  # [N, 2]
    thresholds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> PhantomTensors:
        idx = list(idx)
        return PhantomTensors(
            [self.ids[i] for i in idx], self.images[idx], self.lv_mask[idx], self.brain_mask[idx],
            self.skull[idx], self.scalars[idx], [self.thresholds[i] for i in idx],
        )

    def condition(self, name: str, idx=None, lr_factor: int | None = None) -> torch.Tensor:
        sel = slice(None) if idx is None else list(idx)
        if name == "lv_mask":
            return self.lv_mask[sel]
        if name == "brain_mask":
            return self.brain_mask[sel]
        if name == "skull":
            return self.skull[sel]
        if name == "lr":
            return degrade_axial(self.images[sel], lr_factor or 4)
        raise KeyError(name)


def degrade_axial(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Axial block mean followed by nearest re-expansion to the original grid."""
    if factor == 1:
        return x
    d = x.shape[2]
    n = (d // factor) * factor
    blocks = x[:, :, :n].reshape(x.shape[0], x.shape[1], n // factor, factor, *x.shape[3:]).mean(dim=3)
    up = blocks.repeat_interleave(factor, dim=2)
    if n < d:
        up = torch.cat([up, up[:, :, -1:].expand(-1, -1, d - n, -1, -1)], dim=2)
    return up


def load_phantoms(root: str | Path, clip_lo: float = 0.0, clip_hi: float = 255.0, ids: list[str] | None = None) -> PhantomTensors:
    ids = ids if ids is not None else list_samples(root)
    imgs, lv, brain, skull, scal, thr = [], [], [], [], [], []
    for sid in ids:
        s = read_sample(root, sid)
        img = normalize_minmax(s.image, clip_lo, clip_hi).data
        b = s.brain_mask.data.astype(np.float32)
        imgs.append(img)
        lv.append(s.lv_mask.data.astype(np.float32))
        brain.append(b)
        skull.append(img * (1.0 - b))
        scal.append(covariates(s.params, img.shape[0]))
        thr.append(float(s.params.get("lv_threshold", PhantomParams().lv_threshold)))

    def stack(a):
        return torch.from_numpy(np.stack(a)[:, None].astype(np.float32))

    return PhantomTensors(list(ids), stack(imgs), stack(lv), stack(brain), stack(skull), torch.from_numpy(np.stack(scal)), thr)
