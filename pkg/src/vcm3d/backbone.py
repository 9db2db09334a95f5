"""Toy stand-in for a frozen pretrained latent diffusion model.

Three parts: an autoencoder (``analytic`` block-mean/nearest-upsample or a
small ``trained`` conv net), an embedder for scalar covariates, and a
time-conditioned 3D U-Net noise predictor working in latent space.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError, StateError
from .layers import Downsample, ResBlock, TimeMLP, Upsample, group_norm
from .schedule import NoiseSchedule, forward_noise_batch, linear_beta_schedule

logger = logging.getLogger(__name__)

BACKBONE_DEFAULTS: dict[str, Any] = {
    "volume_shape": [32, 32, 32],
    "latent_channels": 4,
    "downsample": 4,
    "ae_mode": "trained",
    "ae_channels": 16,
    "ae_epochs": 100,
    "ae_lr": 2e-3,
    "unet_base": 32,
    "unet_mult": [1, 2, 2],
    "num_res_blocks": 2,
    "temb_dim": 128,
    "n_scalars": 2,
    "epochs": 200,
    "batch_size": 10,
    "lr": 1e-3,
    "flip_prob": 0.5,
    "prediction": "v",
}


def latent_shape_for(cfg: dict[str, Any]) -> tuple[int, int, int, int]:
    f = int(cfg["downsample"])
    vs = cfg["volume_shape"]
    if any(v % f for v in vs):
        raise ShapeError(f"volume shape {vs} not divisible by downsample factor {f}")
    return (int(cfg["latent_channels"]), *(v // f for v in vs))


# --------------------------------------------------------------------------- #
# Autoencoders


class Autoencoder(nn.Module):
    """Maps ``[B, 1, D, H, W]`` volumes to ``[B, c, D/f, H/f, W/f]`` latents and back."""

    def __init__(self, volume_shape, latent_channels: int = 4, factor: int = 4, mode: str = "analytic", channels: int = 16):
        super().__init__()
        if mode not in ("analytic", "trained"):
            raise ValueError(f"unknown autoencoder mode {mode!r}")
        self.mode = mode
        self.volume_shape = tuple(volume_shape)
        self.latent_channels = latent_channels
        self.factor = factor
        n_down = int(round(math.log2(factor)))
        if 2**n_down != factor:
            raise ShapeError("downsample factor must be a power of two")
        if mode == "trained":
            enc: list[nn.Module] = [nn.Conv3d(1, channels, 3, padding=1), nn.SiLU()]
            ch = channels
            for _ in range(n_down):
                enc += [nn.Conv3d(ch, ch * 2, 3, stride=2, padding=1), nn.SiLU(), nn.Conv3d(ch * 2, ch * 2, 3, padding=1), nn.SiLU()]
                ch *= 2
            enc.append(nn.Conv3d(ch, latent_channels, 1))
            dec: list[nn.Module] = [nn.Conv3d(latent_channels, ch, 3, padding=1), nn.SiLU()]
            for _ in range(n_down):
                dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(ch, ch // 2, 3, padding=1), nn.SiLU(), nn.Conv3d(ch // 2, ch // 2, 3, padding=1), nn.SiLU()]
                ch //= 2
            dec.append(nn.Conv3d(ch, 1, 3, padding=1))
            self.enc = nn.Sequential(*enc)
            self.dec = nn.Sequential(*dec)

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.latent_channels, *(v // self.factor for v in self.volume_shape))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.volume_shape or x.dim() != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected [B, 1, {self.volume_shape}], got {tuple(x.shape)}")
        if self.mode == "analytic":
            m = F.avg_pool3d(x, self.factor)
            return m.expand(-1, self.latent_channels, -1, -1, -1).contiguous()
        return self.enc(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ShapeError(f"expected latent [B, {self.latent_shape}], got {tuple(z.shape)}")
        if self.mode == "analytic":
            m = z.mean(dim=1, keepdim=True)
            return F.interpolate(m, scale_factor=self.factor, mode="nearest")
        return self.dec(z)


class ScalarEmbedder(nn.Module):
    """Maps the covariate vector to the time-embedding width."""

    def __init__(self, n_scalars: int, dim: int) -> None:
        super().__init__()
        self.n_scalars = n_scalars
        self.net = nn.Sequential(nn.Linear(n_scalars, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


class NoisePredictor(nn.Module):
    """Time-conditioned 3D U-Net over latents; scalar embeddings add to the time embedding."""

    def __init__(self, channels: int, base: int = 32, mult=(1, 2, 2), num_res_blocks: int = 2, temb_dim: int = 128, n_scalars: int = 2):
        super().__init__()
        self.time_mlp = TimeMLP(base, temb_dim)
        self.tau = ScalarEmbedder(n_scalars, temb_dim)
        self.conv_in = nn.Conv3d(channels, base, 3, padding=1)
        self.down = nn.ModuleList()
        skip_ch = [base]
        ch = base
        for i, m in enumerate(mult):
            for _ in range(num_res_blocks):
                self.down.append(ResBlock(ch, base * m, temb_dim))
                ch = base * m
                skip_ch.append(ch)
            if i < len(mult) - 1:
                self.down.append(Downsample(ch, ch))
                skip_ch.append(ch)
        self.mid = ResBlock(ch, ch, temb_dim)
        self.up = nn.ModuleList()
        for i, m in reversed(list(enumerate(mult))):
            for _ in range(num_res_blocks + 1):
                self.up.append(ResBlock(ch + skip_ch.pop(), base * m, temb_dim))
                ch = base * m
            if i > 0:
                self.up.append(Upsample(ch, ch))
        self.norm_out = group_norm(ch)
        self.conv_out = nn.Conv3d(ch, channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, scalars: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(t) + self.tau(scalars)
        h = self.conv_in(z)
        hs = [h]
        for layer in self.down:
            h = layer(h, temb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        h = self.mid(h, temb)
        for layer in self.up:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, hs.pop()], dim=1), temb)
            else:
                h = layer(h)
        return self.conv_out(F.silu(self.norm_out(h)))


# --------------------------------------------------------------------------- #
# Backbone wrapper


class Backbone(nn.Module):
    """Autoencoder + covariate embedder + latent noise predictor.

    Latents are standardized with ``latent_shift``/``latent_scale`` (fitted on
    the training set) before diffusion. With ``prediction="v"`` the U-Net
    outputs v = sqrt(abar) eps - sqrt(1 - abar) z0 and :meth:`predict_noise`
    converts it to eps = sqrt(abar) v + sqrt(1 - abar) z_t. Near t = T, where
    abar is ~1e-5, this keeps the implied z0 estimate bounded; a direct eps
    head would need eps errors far below 1e-3 there.
    """

    def __init__(self, cfg: dict[str, Any], schedule_cfg: dict[str, Any] | None = None, loaded: bool = True) -> None:
        super().__init__()
        self.cfg = {**BACKBONE_DEFAULTS, **cfg}
        c = self.cfg
        if c["prediction"] not in ("eps", "v"):
            raise ValueError(f"prediction must be 'eps' or 'v', got {c['prediction']!r}")
        sc = schedule_cfg or {"T": 1000, "beta_start": 0.0015, "beta_end": 0.0205}
        self.schedule_cfg = dict(sc)
        self.schedule: NoiseSchedule = linear_beta_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
        self.ae = Autoencoder(c["volume_shape"], c["latent_channels"], c["downsample"], c["ae_mode"], c["ae_channels"])
        self.predictor = NoisePredictor(
            c["latent_channels"], c["unet_base"], tuple(c["unet_mult"]), c["num_res_blocks"], c["temb_dim"], c["n_scalars"]
        )
        self.register_buffer("latent_shift", torch.zeros(()))
        self.register_buffer("latent_scale", torch.ones(()))
        self.loaded = loaded
        self.frozen = False

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return self.ae.latent_shape

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(self.cfg["volume_shape"])

    def to_latent(self, x: torch.Tensor) -> torch.Tensor:
        return (self.ae.encode(x) - self.latent_shift) * self.latent_scale

    def from_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.ae.decode(z / self.latent_scale + self.latent_shift)

    def coefficients(self, t: torch.Tensor, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(abar_t), sqrt(1 - abar_t)) broadcastable over ``[B, c, h, w, d]``."""
        ab = torch.from_numpy(self.schedule.alpha_bar[t.numpy() - 1]).to(dtype).reshape(-1, 1, 1, 1, 1)
        return ab.sqrt(), (1.0 - ab).sqrt()

    def predict_noise(self, zt: torch.Tensor, scalars: torch.Tensor, t) -> torch.Tensor:
        """Noise prediction for a batch; ``t`` is an int or a per-sample tensor."""
        out, t = self._raw(zt, scalars, t)
        if self.cfg["prediction"] == "eps":
            return out
        a, b = self.coefficients(t, zt.dtype)
        return a * out + b * zt

    def _raw(self, zt: torch.Tensor, scalars: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.loaded:
            raise StateError("backbone parameters are not loaded")
        if tuple(zt.shape[1:]) != self.latent_shape:
            raise ShapeError(f"latent shape {tuple(zt.shape[1:])} != {self.latent_shape}")
        t = _as_t(t, zt.shape[0])
        if int(t.min()) < 1 or int(t.max()) > self.schedule.T:
            raise ValueError(f"timesteps must lie in [1, {self.schedule.T}]")
        if scalars.dim() == 1:
            scalars = scalars.expand(zt.shape[0], -1)
        return self.predictor(zt, t, scalars.to(zt.dtype)), t

    def param_hash(self) -> str:
        return param_hash(self)


def _as_t(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.reshape(-1).expand(batch) if t.numel() == 1 else t.reshape(-1)
    return torch.full((batch,), int(t), dtype=torch.long)


def param_hash(module: nn.Module) -> str:
    """SHA-256 over all parameter and buffer bytes in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(model: nn.Module) -> None:
    """Stop gradient flow into ``model`` and put it in evaluation mode."""
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None
    model.eval()
    model.frozen = True


def unfreeze(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    model.frozen = False


def grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(sq)


# --------------------------------------------------------------------------- #
# Pretraining


@dataclass
class PretrainResult:
    backbone: Backbone
    ae_log: list[float] = field(default_factory=list)
    epoch_log: list[float] = field(default_factory=list)  # epoch-mean noise MSE
    objective_log: list[float] = field(default_factory=list)
    val_loss: float = float("nan")


def train_autoencoder(ae: Autoencoder, images: torch.Tensor, epochs: int, batch_size: int, lr: float, rng: np.random.Generator) -> list[float]:
    """Reconstruction training (MSE + 0.1 L1) for the ``trained`` autoencoder mode."""
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    log = []
    n = images.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        tot = 0.0
        for i in range(0, n, batch_size):
            x = images[perm[i : i + batch_size]]
            z = ae.encode(x)
            rec = ae.decode(z)
            loss = F.mse_loss(rec, x) + 0.1 * F.l1_loss(rec, x) + 1e-4 * z.pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * x.shape[0]
        log.append(tot / n)
    return log


def validation_loss(backbone: Backbone, latents: torch.Tensor, scalars: torch.Tensor, seed: int = 1234) -> float:
    """Noise-prediction MSE with timesteps and noise fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    t = torch.from_numpy(rng.integers(1, backbone.schedule.T + 1, latents.shape[0]))
    eps = torch.from_numpy(rng.standard_normal(latents.shape)).to(latents.dtype)
    with torch.no_grad():
        zt = forward_noise_batch(latents, t, eps, backbone.schedule)
        pred = backbone.predict_noise(zt, scalars, t)
    return float(F.mse_loss(pred, eps))


def pretrain_backbone(images: torch.Tensor, scalars: torch.Tensor, cfg: dict[str, Any], schedule_cfg: dict[str, Any] | None = None, seed: int = 0, log_fn=None) -> PretrainResult:
    """Fit the autoencoder (trained mode) and then the latent noise predictor.

    ``images`` is ``[N, 1, D, H, W]`` in [0, 1]; ``scalars`` is ``[N, n_scalars]``.
    """
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(seed)
    bb = Backbone(cfg, schedule_cfg)
    c = bb.cfg
    streams = np.random.SeedSequence(seed).spawn(4)
    order_rng, t_rng, noise_rng, aug_rng = (np.random.default_rng(s) for s in streams)
    res = PretrainResult(bb)
    if c["ae_mode"] == "trained":
        res.ae_log = train_autoencoder(bb.ae, images, c["ae_epochs"], c["batch_size"], c["ae_lr"], order_rng)
    with torch.no_grad():
        raw = bb.ae.encode(images)
        raw_flip = bb.ae.encode(torch.flip(images, dims=[2]))
        bb.latent_shift.fill_(float(raw.mean()))
        bb.latent_scale.fill_(1.0 / max(float(raw.std()), 1e-6))
        lat = (raw - bb.latent_shift) * bb.latent_scale
        lat_flip = (raw_flip - bb.latent_shift) * bb.latent_scale

    opt = torch.optim.AdamW(bb.predictor.parameters(), lr=c["lr"], weight_decay=0.0)
    n = lat.shape[0]
    T = bb.schedule.T
    for epoch in range(c["epochs"]):
        perm = order_rng.permutation(n)
        tot = tot_eps = 0.0
        for i in range(0, n, c["batch_size"]):
            idx = perm[i : i + c["batch_size"]]
            flip = aug_rng.random(len(idx)) < c["flip_prob"]
            z0 = torch.where(torch.from_numpy(flip)[:, None, None, None, None], lat_flip[idx], lat[idx])
            t = torch.from_numpy(t_rng.integers(1, T + 1, len(idx)))
            eps = torch.from_numpy(noise_rng.standard_normal(z0.shape)).to(z0.dtype)
            zt = forward_noise_batch(z0, t, eps, bb.schedule)
            out, _ = bb._raw(zt, scalars[idx], t)
            if c["prediction"] == "v":
                a, b = bb.coefficients(t, z0.dtype)
                target = a * eps - b * z0
            else:
                target = eps
            loss = F.mse_loss(out, target)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {i // c['batch_size']}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            with torch.no_grad():
                eps_hat = a * out + b * zt if c["prediction"] == "v" else out
                tot_eps += F.mse_loss(eps_hat, eps).item() * len(idx)
        res.objective_log.append(tot / n)
        res.epoch_log.append(tot_eps / n)
        if log_fn is not None:
            log_fn({"epoch": epoch, "loss": res.objective_log[-1], "noise_mse": res.epoch_log[-1]})
    bb.eval()
    res.val_loss = validation_loss(bb, lat, scalars)
    return res
