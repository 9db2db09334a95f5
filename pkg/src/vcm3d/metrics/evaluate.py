"""Directory-level evaluation producing a JSON report."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..errors import NumericError, ParameterError
from ..sampling import extract_lv_mask
from ..volio import list_samples, normalize_minmax, read_sample, read_volume
from .frechet import frechet_distance, get_extractor
from .overlap import assd, dice, hd95, skull_dist
from .similarity import max_scales, mae, ms_ssim, psnr, ssim

PAIRED = ("dice", "hd95", "assd", "skull_dist", "ssim", "ms_ssim", "psnr", "mae")
SET_LEVEL = ("fid",)
ALL_METRICS = PAIRED + SET_LEVEL
INVALID = "invalid"


def _load_gen(gen_dir: Path, sid: str, clip: tuple[float, float]) -> np.ndarray | None:
    """Flat ``<id>.vol`` files are taken as generated [0, 1] volumes; dataset-layout
    ``<id>/image.vol`` files are raw and get min-max normalized."""
    flat = gen_dir / f"{sid}.vol"
    if flat.exists():
        return np.asarray(read_volume(flat).data, dtype=np.float64)
    nested = gen_dir / sid / "image.vol"
    if nested.exists():
        return np.asarray(normalize_minmax(read_volume(nested), *clip).data, dtype=np.float64)
    return None


def _list_gen(gen_dir: Path) -> list[str]:
    ids = {p.stem for p in gen_dir.glob("*.vol")}
    ids |= {p.name for p in gen_dir.iterdir() if p.is_dir() and (p / "image.vol").exists()}
    return sorted(ids)


def evaluate_run(real_dir, gen_dir, metrics: Sequence[str] = ALL_METRICS, extractor: str = "random_conv",
                 mode: str = "3D", clip: tuple[float, float] = (0.0, 255.0), extractor_seed: int = 0) -> dict[str, Any]:
    """Score generated volumes against a phantom dataset.

    Paired metrics use matching sample ids; the Frechet distance compares the
    two sets as a whole. Values that cannot be computed (an empty extracted
    mask, for example) are recorded as ``"invalid"`` and left out of the means.
    """
    real_dir, gen_dir = Path(real_dir), Path(gen_dir)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ParameterError(f"unknown metrics {sorted(unknown)}")
    if mode not in ("2D", "3D"):
        raise ParameterError("mode must be 2D or 3D")
    real_ids = list_samples(real_dir)
    gen_ids = _list_gen(gen_dir) if gen_dir.is_dir() else []
    per_sample: dict[str, dict[str, Any]] = {}
    missing = []
    real_imgs, gen_imgs = [], []
    for sid in real_ids:
        s = read_sample(real_dir, sid)
        real = np.asarray(normalize_minmax(s.image, *clip).data, dtype=np.float64)
        real_imgs.append(real)
        gen = _load_gen(gen_dir, sid, clip) if gen_dir.is_dir() else None
        if gen is None:
            missing.append(sid)
            continue
        if gen.shape != real.shape:
            missing.append(sid)
            continue
        gen_imgs.append(gen)
        row: dict[str, Any] = {}
        brain = s.brain_mask.data.astype(np.float64)
        need_mask = any(m in metrics for m in ("dice", "hd95", "assd"))
        gmask = extract_lv_mask(gen, s.params["lv_threshold"]).data if need_mask else None
        spacing = s.lv_mask.spacing
        for m in metrics:
            if m == "dice":
                row[m] = dice(s.lv_mask, gmask)
            elif m in ("hd95", "assd"):
                try:
                    row[m] = (hd95 if m == "hd95" else assd)(s.lv_mask, gmask, spacing)
                except NumericError:
                    row[m] = INVALID
            elif m == "skull_dist":
                row[m] = skull_dist(real * (1 - brain), gen * (1 - brain))
            elif m == "ssim":
                row[m] = ssim(real, gen)
            elif m == "ms_ssim":
                row[m] = ms_ssim(real, gen, scales=max_scales(real.shape))
            elif m == "psnr":
                row[m] = psnr(real, gen)
            elif m == "mae":
                row[m] = mae(real, gen)
        per_sample[sid] = row
    for sid in gen_ids:
        if sid not in real_ids:
            missing.append(sid)

    means: dict[str, Any] = {}
    for m in metrics:
        if m in SET_LEVEL:
            continue
        vals = [r[m] for r in per_sample.values() if isinstance(r.get(m), (int, float))]
        means[m] = float(np.mean(vals)) if vals else None
    if "fid" in metrics:
        key = f"fid_{mode.lower()}"
        if len(gen_imgs) >= 2 and len(real_imgs) >= 2:
            ext = get_extractor(extractor, extractor_seed)
            means[key] = frechet_distance(ext(np.stack(real_imgs), mode), ext(np.stack(gen_imgs), mode))
        else:
            means[key] = None
    ok = all(v is not None and not (isinstance(v, float) and math.isnan(v)) for v in means.values())
    return {
        "per_sample": per_sample,
        "means": means,
        "missing": sorted(missing),
        "ok": ok,
        "config": {"real": str(real_dir), "gen": str(gen_dir), "metrics": list(metrics), "mode": mode,
                   "extractor": extractor, "extractor_seed": extractor_seed, "clip": list(clip)},
    }


def write_report(report: dict[str, Any], path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=True))


def summary_table(report: dict[str, Any]) -> str:
    lines = [f"{'metric':<12} {'mean':>14} {'n':>4}"]
    for m, v in report["means"].items():
        n = sum(1 for r in report["per_sample"].values() if isinstance(r.get(m), (int, float)))
        shown = "n/a" if v is None else repr(v)
        lines.append(f"{m:<12} {shown:>14} {n:>4}")
    if report["missing"]:
        lines.append(f"missing pairs: {', '.join(report['missing'])}")
    return "\n".join(lines)
