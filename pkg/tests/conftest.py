from __future__ import annotations

import os

import numpy as np
import pytest
import torch

from vcm3d.backbone import Backbone, freeze
from vcm3d.volio import generate_dataset

torch.set_num_threads(1)
os.environ.setdefault("HYPOTHESIS_PROFILE", "default")

TINY_BACKBONE = {
    "volume_shape": [16, 16, 16],
    "latent_channels": 4,
    "downsample": 2,
    "ae_mode": "analytic",
    "unet_base": 8,
    "unet_mult": [1, 2],
    "num_res_blocks": 1,
    "temb_dim": 32,
    "epochs": 2,
    "batch_size": 4,
}

TINY_VCM = {"base_channels": 4, "channel_mult": [1, 2, 4], "num_res_blocks": 1, "temb_dim": 16}


def make_backbone(seed: int = 0, **over) -> Backbone:
    torch.manual_seed(seed)
    bb = Backbone({**TINY_BACKBONE, **over})
    bb.eval()
    return bb


@pytest.fixture
def tiny_backbone() -> Backbone:
    bb = make_backbone()
    freeze(bb)
    return bb


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms16")
    generate_dataset(root, 6, 16, seed=11)
    return root


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tiny_run_config(modalities=("lv_mask",), **sections) -> dict:
    """Full run configuration at the 16^3 test scale; ``sections`` are merged per top-level key."""
    from vcm3d.config import DEFAULT_CONFIG, merge, validate

    base = {
        "data": {"size": 16},
        "backbone": TINY_BACKBONE,
        "vcm": {**TINY_VCM, "modalities": list(modalities)},
        "optim": {"lr": 1e-3, "warmup_steps": 1, "batch_size": 2, "steps": 4},
    }
    cfg = merge(DEFAULT_CONFIG, base)
    for k, v in sections.items():
        cfg = merge(cfg, {k: v})
    validate(cfg)
    return cfg


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one pass/fail line for the terminal summary."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
