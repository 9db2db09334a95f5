"""VCM objective and the optimization loop over a frozen backbone."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from .backbone import Backbone, freeze, grad_norm, param_hash
from .checkpoint import arrays_to_optimizer, arrays_to_state, load_archive, optimizer_to_arrays, save_archive, state_to_arrays
from .data import PhantomTensors, degrade_axial
from .errors import ConfigError, NumericError, ShapeError
from .schedule import forward_noise_batch, linear_beta_schedule
from .vcm import DropConfig, VCMNetwork, build_vcm, modulate, sample_drop_mask

logger = logging.getLogger(__name__)

STREAMS = ("order", "timestep", "noise", "dropout", "augment")


@dataclass
class LossConfig:
    """``auto``: lambda = 1 / (b*c*h*w*d); ``explicit``: use ``lambda_value``."""

    lambda_mode: str = "auto"
    lambda_value: float = 1.0

    def lam(self, batch: int, latent_shape) -> float:
        if self.lambda_mode == "auto":
            return 1.0 / (batch * math.prod(latent_shape))
        if self.lambda_mode == "explicit":
            if self.lambda_value <= 0:
                raise ConfigError("lambda must be > 0")
            return float(self.lambda_value)
        raise ConfigError(f"unknown lambda_mode {self.lambda_mode!r}")


def vcm_loss(eps_true: torch.Tensor, eps_mod: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, lam: float) -> dict[str, torch.Tensor]:
    """MSE(eps, eps') + lam*sum|gamma| + lam*sum|beta|, returned with its parts."""
    if eps_true.shape != eps_mod.shape or gamma.shape != eps_true.shape or beta.shape != eps_true.shape:
        raise ShapeError("loss inputs must share one shape")
    for name, x in (("eps", eps_true), ("eps_mod", eps_mod), ("gamma", gamma), ("beta", beta)):
        if not bool(torch.isfinite(x).all()):
            raise NumericError(f"non-finite values in {name}")
    mse = (eps_true - eps_mod).pow(2).mean()
    l1_g = gamma.abs().sum()
    l1_b = beta.abs().sum()
    return {"total": mse + lam * l1_g + lam * l1_b, "mse": mse, "l1_gamma": l1_g, "l1_beta": l1_b}


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup: base_lr * min(1, step / warmup_steps)."""
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    perm: list[int] = field(default_factory=list)
    cursor: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    log: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def fresh(cls, seed: int) -> TrainState:
        seqs = np.random.SeedSequence(seed).spawn(len(STREAMS))
        return cls(rngs={n: np.random.default_rng(s) for n, s in zip(STREAMS, seqs)})

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step, "epoch": self.epoch, "perm": list(map(int, self.perm)), "cursor": self.cursor,
            "rngs": {n: g.bit_generator.state for n, g in self.rngs.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainState:
        rngs = {}
        for n, st in d["rngs"].items():
            g = np.random.default_rng()
            g.bit_generator.state = st
            rngs[n] = g
        return cls(d["step"], d["epoch"], list(d["perm"]), d["cursor"], rngs)

    def next_indices(self, n: int, batch: int) -> np.ndarray:
        """Shuffled minibatches; a new permutation starts each epoch."""
        out = []
        while len(out) < min(batch, n):
            if self.cursor >= len(self.perm):
                self.perm = self.rngs["order"].permutation(n).tolist()
                self.cursor = 0
                self.epoch += 1
            take = min(batch - len(out), len(self.perm) - self.cursor)
            out.extend(self.perm[self.cursor : self.cursor + take])
            self.cursor += take
        return np.asarray(out)


def make_batch(data: PhantomTensors, idx, modalities, state: TrainState, flip_prob: float, lr_factors=(1, 4, 8)) -> dict[str, Any]:
    """Images, scalars and conditions for ``idx`` with a joint axial flip."""
    images = data.images[idx]
    conds = {}
    for m in modalities:
        if m == "lr":
            f = state.rngs["augment"].choice(lr_factors, size=len(idx))
            conds[m] = torch.cat([degrade_axial(images[i : i + 1], int(fi)) for i, fi in enumerate(f)])
        else:
            conds[m] = data.condition(m, idx)
    flip = torch.from_numpy(state.rngs["augment"].random(len(idx)) < flip_prob)[:, None, None, None, None]
    images = torch.where(flip, images.flip(2), images)
    conds = {m: torch.where(flip, y.flip(2), y) for m, y in conds.items()}
    return {"images": images, "conds": conds, "scalars": data.scalars[idx]}


def train_step(batch: dict[str, Any], backbone: Backbone, vcm: VCMNetwork, dc: DropConfig, lc: LossConfig,
               state: TrainState, optimizer: torch.optim.Optimizer, lr: float | None = None) -> dict[str, float]:
    """One VCM update; the backbone only runs forward without gradients."""
    if not getattr(backbone, "frozen", False):
        raise ConfigError("backbone must be frozen before VCM training")
    s = backbone.schedule
    with torch.no_grad():
        z0 = backbone.to_latent(batch["images"])
        b = z0.shape[0]
        t = torch.from_numpy(state.rngs["timestep"].integers(1, s.T + 1, b))
        eps = torch.from_numpy(state.rngs["noise"].standard_normal(z0.shape)).to(z0.dtype)
        zt = forward_noise_batch(z0, t, eps, s)
        eps_t = backbone.predict_noise(zt, batch["scalars"], t)
    keep = torch.from_numpy(np.stack([sample_drop_mask(dc, len(vcm.modalities), state.rngs["dropout"]) for _ in range(b)]))
    vcm.train()
    gamma, beta = vcm(zt, eps_t, batch["conds"], t, keep)
    eps_mod = modulate(eps_t, gamma, beta)
    lam = lc.lam(b, z0.shape[1:])
    parts = vcm_loss(eps, eps_mod, gamma, beta, lam)
    loss = parts["total"]
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step + 1}")
    if lr is not None:
        for g in optimizer.param_groups:
            g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    vcm_gn = grad_norm(vcm.parameters())
    bb_gn = grad_norm(backbone.parameters())
    optimizer.step()
    state.step += 1
    return {
        "step": state.step, "loss": loss.item(), "mse": parts["mse"].item(), "l1_gamma": parts["l1_gamma"].item(),
        "l1_beta": parts["l1_beta"].item(), "lambda": lam, "lr": optimizer.param_groups[0]["lr"],
        "grad_norm_vcm": vcm_gn, "grad_norm_backbone": bb_gn,
    }


def make_optimizer(vcm: VCMNetwork, optim_cfg: dict[str, Any]) -> torch.optim.Optimizer:
    return torch.optim.AdamW(vcm.parameters(), lr=optim_cfg["lr"], betas=tuple(optim_cfg["betas"]), weight_decay=optim_cfg["weight_decay"])


@dataclass
class TrainRun:
    vcm: VCMNetwork
    optimizer: torch.optim.Optimizer
    state: TrainState
    config: dict[str, Any]
    backbone_hash_start: str = ""
    backbone_hash_end: str = ""


def run_training(data: PhantomTensors, backbone: Backbone, config: dict[str, Any], seed: int = 0, steps: int | None = None,
                 resume: TrainRun | None = None, out_dir: str | Path | None = None,
                 log_fn: Callable[[dict[str, Any]], None] | None = None) -> TrainRun:
    """Train a VCM for ``steps`` (default ``optim.steps``) updates.

    With ``out_dir`` set, metrics are appended to ``metrics.jsonl`` and
    periodic plus final checkpoints are written there.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    vcfg, ocfg = config["vcm"], config["optim"]
    if tuple(data.images.shape[2:]) != backbone.volume_shape:
        raise ConfigError(f"data volumes {tuple(data.images.shape[2:])} do not match backbone {backbone.volume_shape}")
    freeze(backbone)
    dc = DropConfig.from_dict(config["dropout"])
    dc.validate(len(vcfg["modalities"]))
    lc = LossConfig(config["loss"]["lambda_mode"], config["loss"]["lambda_value"])
    if resume is None:
        torch.manual_seed(seed)
        vcm = build_vcm(vcfg, backbone.volume_shape, backbone.latent_shape, backbone.schedule)
        run = TrainRun(vcm, make_optimizer(vcm, ocfg), TrainState.fresh(seed), config)
    else:
        run = resume
    if tuple(run.vcm.latent_shape) != tuple(backbone.latent_shape):
        raise ConfigError("VCM latent plan does not match the backbone")
    run.backbone_hash_start = param_hash(backbone)
    steps = ocfg["steps"] if steps is None else steps
    metrics_f = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out_dir / "metrics.jsonl", "a")
    t0 = time.time()
    try:
        for _ in range(steps):
            idx = run.state.next_indices(len(data), ocfg["batch_size"])
            batch = make_batch(data, idx, run.vcm.modalities, run.state, ocfg["flip_prob"], tuple(vcfg["lr_factors"]))
            lr = lr_at(run.state.step + 1, ocfg["lr"], ocfg["warmup_steps"])
            m = train_step(batch, backbone, run.vcm, dc, lc, run.state, run.optimizer, lr)
            m["epoch"] = run.state.epoch
            run.state.log.append(m)
            if metrics_f is not None and m["step"] % max(1, config["logging"]["every"]) == 0:
                metrics_f.write(json.dumps(m) + "\n")
            if log_fn is not None:
                log_fn(m)
            every = ocfg.get("checkpoint_every", 0)
            if out_dir is not None and every and m["step"] % every == 0:
                save_vcm(out_dir / f"vcm_step{m['step']:06d}.ckpt", run)
    finally:
        if metrics_f is not None:
            metrics_f.close()
    run.backbone_hash_end = param_hash(backbone)
    logger.info("trained %d steps in %.1fs", steps, time.time() - t0)
    if out_dir is not None:
        save_vcm(out_dir / "vcm.ckpt", run)
    return run


def save_vcm(path: str | Path, run: TrainRun) -> None:
    optim_meta, optim_arrays = optimizer_to_arrays(run.optimizer)
    cfg = {
        "kind": "vcm",
        "frozen": False,
        "modality_list": run.vcm.modalities,
        "drop_config": run.config["dropout"],
        "volume_shape": list(run.vcm.volume_shape),
        "latent_shape": list(run.vcm.latent_shape),
        "run_config": run.config,
        "train_state": run.state.to_dict(),
        "optimizer": optim_meta,
    }
    save_archive(path, cfg, {**state_to_arrays(run.vcm), **optim_arrays})


def load_vcm(path: str | Path) -> TrainRun:
    cfg, tensors = load_archive(path)
    if cfg.get("kind") != "vcm":
        raise ConfigError(f"{path} is not a VCM checkpoint")
    rc = cfg["run_config"]
    sc = rc["schedule"]
    schedule = linear_beta_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    vcm = build_vcm(rc["vcm"], cfg["volume_shape"], cfg["latent_shape"], schedule)
    arrays_to_state(tensors, vcm)
    opt = make_optimizer(vcm, rc["optim"])
    arrays_to_optimizer(cfg["optimizer"], tensors, opt)
    vcm.eval()
    return TrainRun(vcm, opt, TrainState.from_dict(cfg["train_state"]), rc)


def save_backbone(path: str | Path, backbone: Backbone, extra: dict[str, Any] | None = None) -> None:
    cfg = {
        "kind": "backbone",
        "backbone": backbone.cfg,
        "schedule": backbone.schedule_cfg,
        "latent_shape": list(backbone.latent_shape),
        "frozen": bool(getattr(backbone, "frozen", False)),
        **(extra or {}),
    }
    save_archive(path, cfg, state_to_arrays(backbone))


def load_backbone(path: str | Path) -> tuple[Backbone, dict[str, Any]]:
    cfg, tensors = load_archive(path)
    if cfg.get("kind") != "backbone":
        raise ConfigError(f"{path} is not a backbone checkpoint")
    bb = Backbone(cfg["backbone"], cfg["schedule"], loaded=False)
    arrays_to_state(tensors, bb)
    bb.loaded = True
    bb.eval()
    if cfg.get("frozen"):
        freeze(bb)
    return bb, cfg
