"""Checkpoint archives: a zip holding ``config.json`` plus one VOL1 payload per tensor."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import FormatError
from .volio import decode_array, encode_array

CKPT_VERSION = 1


def save_archive(path: str | Path, config: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    cfg = {**config, "ckpt_version": CKPT_VERSION}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(cfg, indent=2, sort_keys=True))
        for name, arr in tensors.items():
            zf.writestr(f"tensors/{name}.vol", encode_array(arr))


def load_archive(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise FormatError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            cfg = json.loads(zf.read("config.json"))
        except KeyError as exc:
            raise FormatError("checkpoint lacks config.json") from exc
        if cfg.get("ckpt_version") != CKPT_VERSION:
            raise FormatError(f"unsupported ckpt_version {cfg.get('ckpt_version')!r}")
        tensors = {}
        for info in zf.infolist():
            if info.filename.startswith("tensors/") and info.filename.endswith(".vol"):
                tensors[info.filename[len("tensors/") : -len(".vol")]] = decode_array(zf.read(info))[0]
    return cfg, tensors


def state_to_arrays(module: torch.nn.Module, prefix: str = "model/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(tensors: dict[str, np.ndarray], module: torch.nn.Module, prefix: str = "model/") -> None:
    ref = module.state_dict()
    state = {}
    for k, v in ref.items():
        key = prefix + k
        if key not in tensors:
            raise FormatError(f"checkpoint is missing tensor {key!r}")
        arr = torch.from_numpy(tensors[key]).to(v.dtype)
        if arr.shape != v.shape:
            raise FormatError(f"tensor {key!r} has shape {tuple(arr.shape)}, expected {tuple(v.shape)}")
        state[k] = arr
    module.load_state_dict(state)


def optimizer_to_arrays(opt: torch.optim.Optimizer) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Moments go to VOL1 payloads; scalar entries (step counts) stay in JSON."""
    sd = opt.state_dict()
    arrays, scalars = {}, {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            if isinstance(v, torch.Tensor) and v.dim() > 0:
                arrays[f"optim/{pid}/{k}"] = v.detach().cpu().float().numpy()
            else:
                scalars[f"{pid}/{k}"] = float(v)
    return {"scalars": scalars, "param_groups": sd["param_groups"]}, arrays


def arrays_to_optimizer(meta: dict[str, Any], tensors: dict[str, np.ndarray], opt: torch.optim.Optimizer) -> None:
    state: dict[int, dict[str, Any]] = {}
    for key, val in meta["scalars"].items():
        pid, k = key.split("/")
        state.setdefault(int(pid), {})[k] = torch.tensor(val, dtype=torch.float32)
    for key, arr in tensors.items():
        if key.startswith("optim/"):
            _, pid, k = key.split("/")
            state.setdefault(int(pid), {})[k] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
