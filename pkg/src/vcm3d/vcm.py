"""Volumetric conditioning module.

Per-modality encoders take full-resolution condition volumes down to the
latent resolution. Their outputs are zeroed for dropped modalities and summed.
The sum is concatenated with the diffusion priors ``(z_t, eps_t)`` and fed to a
shallower time-conditioned trunk. A zero-initialized split head then emits the
``(gamma, beta)`` modulation of the frozen backbone's noise prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .layers import Downsample, ResBlock, TimeMLP, Upsample, group_norm, zero_module
from .schedule import NoiseSchedule

VCM_DEFAULTS: dict[str, Any] = {
    "modalities": ["lv_mask"],
    "base_channels": 8,
    "channel_mult": [1, 2, 4],
    "num_res_blocks": 2,
    "temb_dim": 64,
    "lr_factors": [1, 4, 8],
    "output_gain": "sqrt_alpha_bar",
}


# --------------------------------------------------------------------------- #
# Modality latent dropout


@dataclass
class DropConfig:
    """``categorical``: probabilities over keep-subsets (in ``subsets`` order).
    ``independent``: per-modality drop probabilities, redrawn if all drop."""

    scheme: str = "categorical"
    subsets: list[list[int]] = field(default_factory=lambda: [[0], [1], [0, 1]])
    probs: list[float] = field(default_factory=lambda: [0.3, 0.3, 0.4])
    drop_probs: list[float] = field(default_factory=list)

    def validate(self, n_modalities: int) -> None:
        if self.scheme not in ("categorical", "independent"):
            raise ConfigError(f"unknown drop scheme {self.scheme!r}")
        if n_modalities == 1:
            return
        if self.scheme == "categorical":
            if len(self.subsets) != len(self.probs):
                raise ConfigError("subsets and probs differ in length")
            if any(not 0.0 <= p <= 1.0 for p in self.probs):
                raise ConfigError("probabilities must lie in [0, 1]")
            if abs(sum(self.probs) - 1.0) > 1e-9:
                raise ConfigError(f"categorical probabilities sum to {sum(self.probs)}, not 1")
            for s in self.subsets:
                if not s or any(not 0 <= i < n_modalities for i in s):
                    raise ConfigError(f"invalid keep-subset {s} for {n_modalities} modalities")
        else:
            if len(self.drop_probs) != n_modalities:
                raise ConfigError("need one drop probability per modality")
            if any(not 0.0 <= p < 1.0 for p in self.drop_probs):
                raise ConfigError("drop probabilities must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return {"scheme": self.scheme, "subsets": self.subsets, "probs": self.probs, "drop_probs": self.drop_probs}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DropConfig:
        return cls(d.get("scheme", "categorical"), [list(s) for s in d.get("subsets", [[0], [1], [0, 1]])], list(d.get("probs", [0.3, 0.3, 0.4])), list(d.get("drop_probs", [])))


def sample_drop_mask(dc: DropConfig, n_modalities: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-vector of length ``n_modalities``; never all-false."""
    dc.validate(n_modalities)
    if n_modalities == 1:
        return np.ones(1, dtype=bool)
    keep = np.zeros(n_modalities, dtype=bool)
    if dc.scheme == "categorical":
        k = rng.choice(len(dc.probs), p=np.asarray(dc.probs, dtype=np.float64))
        keep[dc.subsets[k]] = True
        return keep
    p_keep = 1.0 - np.asarray(dc.drop_probs)
    while not keep.any():
        keep = rng.random(n_modalities) < p_keep
    return keep


# --------------------------------------------------------------------------- #
# Network


def modulate(eps_t: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """eps' = eps * (1 + gamma) + beta."""
    if eps_t.shape != gamma.shape or eps_t.shape != beta.shape:
        raise ShapeError(f"shape mismatch eps {tuple(eps_t.shape)}, gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}")
    return eps_t * (1.0 + gamma) + beta


class ConditionEncoder(nn.Module):
    """Full-resolution -> latent-resolution encoder for one modality."""

    def __init__(self, base: int, mult: Sequence[int], stage: int, num_res: int, temb_dim: int) -> None:
        super().__init__()
        self.conv_in = nn.Conv3d(1, base * mult[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        ch = base * mult[0]
        for i in range(stage + 1):
            for _ in range(num_res):
                self.blocks.append(ResBlock(ch, base * mult[i], temb_dim))
                ch = base * mult[i]
            if i < stage:
                self.blocks.append(Downsample(ch, base * mult[i + 1]))
                ch = base * mult[i + 1]
        self.out_channels = ch

    def forward(self, y: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(y)
        for b in self.blocks:
            h = b(h, temb) if isinstance(b, ResBlock) else b(h)
        return h


class VCMNetwork(nn.Module):
    """Asymmetric time-conditioned U-Net producing ``(gamma, beta)`` of latent shape.

    Encoder levels run from the volume resolution down to the deepest level
    of ``channel_mult``; the decoder only climbs back to the latent stage.
    """

    def __init__(self, modalities: Sequence[str], volume_shape, latent_shape, base_channels: int = 8,
                 channel_mult: Sequence[int] = (1, 2, 4), num_res_blocks: int = 2, temb_dim: int = 64) -> None:
        super().__init__()
        if not modalities:
            raise ConfigError("at least one modality is required")
        if len(set(modalities)) != len(modalities):
            raise ConfigError("duplicate modality names")
        self.modalities = list(modalities)
        self.volume_shape = tuple(volume_shape)
        self.latent_shape = tuple(latent_shape)
        c = self.latent_shape[0]
        ratio = self.volume_shape[0] // self.latent_shape[1]
        stage = int(round(math.log2(ratio))) if ratio > 0 else -1
        if ratio < 1 or 2**stage != ratio or any(v // ratio != l or v % ratio for v, l in zip(self.volume_shape, self.latent_shape[1:])):
            raise ShapeError(f"latent {self.latent_shape} is not a dyadic reduction of {self.volume_shape}")
        if stage >= len(channel_mult):
            raise ConfigError(f"channel_mult needs more than {stage} levels to reach the latent resolution")
        if self.volume_shape[0] % 2 ** (len(channel_mult) - 1):
            raise ShapeError("volume shape not divisible by the deepest level stride")
        self.stage = stage
        mult = list(channel_mult)
        self.time_mlp = TimeMLP(base_channels * mult[0], temb_dim)
        self.encoders = nn.ModuleDict({m: ConditionEncoder(base_channels, mult, stage, num_res_blocks, temb_dim) for m in self.modalities})
        fuse_ch = base_channels * mult[stage]
        self.fuse_in = nn.Conv3d(fuse_ch + 2 * c, fuse_ch, 3, padding=1)
        self.trunk_down = nn.ModuleList()
        skip_ch = [fuse_ch]
        ch = fuse_ch
        for i in range(stage, len(mult)):
            for _ in range(num_res_blocks):
                self.trunk_down.append(ResBlock(ch, base_channels * mult[i], temb_dim))
                ch = base_channels * mult[i]
                skip_ch.append(ch)
            if i < len(mult) - 1:
                self.trunk_down.append(Downsample(ch, ch))
                skip_ch.append(ch)
        self.trunk_up = nn.ModuleList()
        for i in reversed(range(stage, len(mult))):
            for _ in range(num_res_blocks + 1):
                self.trunk_up.append(ResBlock(ch + skip_ch.pop(), base_channels * mult[i], temb_dim))
                ch = base_channels * mult[i]
            if i > stage:
                self.trunk_up.append(Upsample(ch, ch))
        self.norm_out = group_norm(ch)
        self.conv_out = nn.Conv3d(ch, ch, 3, padding=1)
        self.split_head = zero_module(nn.Conv3d(ch, 2 * c, 1))
        self.register_buffer("gain", torch.ones(0), persistent=False)

    def set_output_gain(self, table) -> None:
        """Per-timestep multiplier on (gamma, beta); ``table[t]`` for t = 0..T."""
        self.gain = torch.as_tensor(np.asarray(table), dtype=torch.float32)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(t)

    def encode_conditions(self, conds: dict[str, torch.Tensor], keep: torch.Tensor, temb: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-modality features at the latent resolution; dropped entries are exact zeros.

        ``keep`` is ``[B, n_modalities]`` boolean. Modalities absent from
        ``conds`` must be dropped for every sample.
        """
        unknown = set(conds) - set(self.modalities)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}; trained on {self.modalities}")
        feats = {}
        for j, m in enumerate(self.modalities):
            k = keep[:, j]
            if m not in conds:
                if bool(k.any()):
                    raise ConfigError(f"modality {m!r} kept but not provided")
                continue
            y = conds[m]
            if tuple(y.shape[-3:]) != self.volume_shape or y.dim() != 5:
                raise ShapeError(f"condition {m!r} has shape {tuple(y.shape)}, expected [B, 1, {self.volume_shape}]")
            if not bool(k.any()):
                continue
            f = self.encoders[m](y, temb)
            feats[m] = torch.where(k[:, None, None, None, None], f, torch.zeros((), dtype=f.dtype))
        return feats

    def forward(self, zt: torch.Tensor, eps_t: torch.Tensor, conds: dict[str, torch.Tensor], t, keep: torch.Tensor | None = None):
        if tuple(zt.shape[1:]) != self.latent_shape or zt.shape != eps_t.shape:
            raise ShapeError(f"priors {tuple(zt.shape)}/{tuple(eps_t.shape)} do not match latent {self.latent_shape}")
        b = zt.shape[0]
        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), int(t), dtype=torch.long)
        elif t.numel() == 1:
            t = t.reshape(1).expand(b)
        if keep is None:
            keep = torch.tensor([[m in conds for m in self.modalities]] * b, dtype=torch.bool)
        keep = torch.as_tensor(keep, dtype=torch.bool)
        if keep.dim() == 1:
            keep = keep[None].expand(b, -1)
        temb = self.time_embedding(t)
        feats = self.encode_conditions(conds, keep, temb)
        fused = torch.zeros((b, self.fuse_in.in_channels - 2 * zt.shape[1], *zt.shape[2:]), dtype=zt.dtype)
        for f in feats.values():
            fused = fused + f
        h = self.fuse_in(torch.cat([fused, zt, eps_t], dim=1))
        hs = [h]
        for layer in self.trunk_down:
            h = layer(h, temb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        for layer in self.trunk_up:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, hs.pop()], dim=1), temb)
            else:
                h = layer(h)
        h = self.conv_out(F.silu(self.norm_out(h)))
        out = self.split_head(h)
        if self.gain.numel():
            out = out * self.gain[t].to(out.dtype).reshape(-1, 1, 1, 1, 1)
        gamma, beta = out.chunk(2, dim=1)
        return gamma, beta


def build_vcm(cfg: dict[str, Any], volume_shape, latent_shape, schedule: NoiseSchedule | None = None) -> VCMNetwork:
    """Construct a VCM; ``output_gain="sqrt_alpha_bar"`` scales the head by sqrt(abar_t).

    The scaled head keeps the modulation's effect on the implied z0 estimate
    bounded at large t, where eps errors are amplified by 1/sqrt(abar_t).
    """
    c = {**VCM_DEFAULTS, **cfg}
    net = VCMNetwork(c["modalities"], volume_shape, latent_shape, c["base_channels"], c["channel_mult"], c["num_res_blocks"], c["temb_dim"])
    if c["output_gain"] == "sqrt_alpha_bar":
        if schedule is None:
            raise ConfigError("output_gain 'sqrt_alpha_bar' needs the noise schedule")
        net.set_output_gain(np.sqrt(np.concatenate([[1.0], schedule.alpha_bar])))
    elif c["output_gain"] != "none":
        raise ConfigError(f"output_gain must be 'sqrt_alpha_bar' or 'none', got {c['output_gain']!r}")
    return net
