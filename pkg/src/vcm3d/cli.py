"""Command-line entry point: ``vcm3d <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import config as cfgmod
from .backbone import freeze, pretrain_backbone
from .data import load_phantoms
from .errors import ConfigError, FormatError, NumericError, ParameterError, ShapeError, StateError
from .metrics import evaluate_run, summary_table, write_report
from .metrics.similarity import mae, psnr, ssim
from .sampling import GenerationRequest, lr_condition, sample_conditional, sample_unconditional
from .schedule import SamplerConfig
from .training import load_backbone, load_vcm, run_training, save_backbone
from .volio import PhantomParams, Volume3D, axial_downsample, generate_dataset, list_samples, normalize_minmax, read_sample, read_volume, write_volume

logger = logging.getLogger("vcm3d")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prepare_out(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_logging(out: Path | None) -> None:
    logger.setLevel(logging.INFO)
    for h in list(logger.handlers):
        logger.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(h)
    if out is not None:
        fh = logging.FileHandler(out / "run.log")
        fh.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        logger.addHandler(fh)


def _effective_config(args) -> dict[str, Any]:
    return cfgmod.load_config(args.config, args.set)


def _echo_config(out: Path, cfg: dict[str, Any], seed: int, extra: dict[str, Any] | None = None) -> None:
    (out / "config.json").write_text(json.dumps({"seed": seed, "config": cfg, **(extra or {})}, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- #
# commands


def cmd_gen_data(args) -> int:
    if args.size < 16:
        raise ParameterError(f"--size must be >= 16, got {args.size}")
    if args.n < 1:
        raise ParameterError("--n must be >= 1")
    params = PhantomParams.from_dict(json.loads(args.params)) if args.params else PhantomParams()
    out = _prepare_out(args.out, args.force)
    ids = generate_dataset(out, args.n, args.size, args.seed, params, start=args.start)
    logger.info("wrote %d samples to %s", len(ids), out)
    return EXIT_OK


def cmd_train_backbone(args) -> int:
    cfg = _effective_config(args)
    data = load_phantoms(args.data, cfg["data"]["clip_lo"], cfg["data"]["clip_hi"])
    if tuple(data.images.shape[2:]) != tuple(cfg["backbone"]["volume_shape"]):
        raise ConfigError(f"data volumes {tuple(data.images.shape[2:])} do not match data.size={cfg['data']['size']}")
    out = _prepare_out(args.out, args.force)
    _setup_logging(out)
    _echo_config(out, cfg, args.seed)
    with open(out / "metrics.jsonl", "w") as f:
        def log(m):
            f.write(json.dumps(m) + "\n")
            f.flush()
        sc = {k: cfg["schedule"][k] for k in ("T", "beta_start", "beta_end")}
        res = pretrain_backbone(data.images, data.scalars, cfg["backbone"], sc, seed=args.seed, log_fn=log)
    freeze(res.backbone)
    save_backbone(out / "backbone.ckpt", res.backbone, {"val_loss": res.val_loss, "epoch_log": res.epoch_log, "ae_log": res.ae_log})
    logger.info("backbone: first epoch loss %.4f, last %.4f, validation %.4f", res.epoch_log[0], res.epoch_log[-1], res.val_loss)
    return EXIT_OK


def cmd_train_vcm(args) -> int:
    cfg = _effective_config(args)
    out = _prepare_out(args.out, args.force)
    _setup_logging(out)
    bb, _ = load_backbone(args.backbone)
    freeze(bb)
    frozen = all(not p.requires_grad for p in bb.parameters())
    logger.info("backbone frozen: %s", "true" if frozen else "false")
    if not frozen:
        raise StateError("backbone is not frozen")
    if list(bb.volume_shape) != cfg["backbone"]["volume_shape"]:
        raise ConfigError(f"backbone volume shape {list(bb.volume_shape)} != config data.size {cfg['data']['size']}")
    data = load_phantoms(args.data, cfg["data"]["clip_lo"], cfg["data"]["clip_hi"])
    resume = load_vcm(args.resume) if args.resume else None
    _echo_config(out, cfg, args.seed, {"backbone": str(args.backbone), "backbone_sha256": _sha256(args.backbone)})
    run = run_training(data, bb, cfg, seed=args.seed, resume=resume, out_dir=out)
    if run.backbone_hash_start != run.backbone_hash_end:
        raise StateError("backbone parameters changed during VCM training")
    logger.info("backbone hash unchanged: %s", run.backbone_hash_end[:16])
    logger.info("final loss %.5f after %d steps", run.state.log[-1]["loss"], run.state.step)
    return EXIT_OK


def _sample_impl(a: dict[str, Any], out: Path) -> list[Path]:
    bb, _ = load_backbone(a["backbone"])
    sampler = SamplerConfig(a["eta"], a["steps"])
    ids: list[str]
    conds: dict[str, torch.Tensor] = {}
    scalars = None
    vcm = None
    if a.get("cond") and not a.get("vcm"):
        raise UsageError("--cond requires --vcm")
    if a.get("n") is not None and a["n"] < 1:
        raise ParameterError("--n must be >= 1")
    if a.get("vcm"):
        run = load_vcm(a["vcm"])
        vcm = run.vcm
    if a.get("cond"):
        cond_dir = Path(a["cond"])
        ids = list_samples(cond_dir)[: a["n"]] if a["n"] else list_samples(cond_dir)
        rc = run.config
        data = load_phantoms(cond_dir, rc["data"]["clip_lo"], rc["data"]["clip_hi"], ids)
        mods = a.get("modalities") or vcm.modalities
        unknown = set(mods) - set(vcm.modalities)
        if unknown:
            raise ConfigError(f"modalities {sorted(unknown)} not in trained list {vcm.modalities}")
        conds = {m: data.condition(m, lr_factor=a.get("lr_factor") or 4) for m in mods}
        scalars = data.scalars
    elif a.get("covariates"):
        cov_dir = Path(a["covariates"])
        ids = list_samples(cov_dir)[: a["n"]] if a["n"] else list_samples(cov_dir)
        scalars = load_phantoms(cov_dir, ids=ids).scalars
    else:
        ids = [f"sample_{i:04d}" for i in range(a["n"] or 1)]
    n = len(ids)
    req = GenerationRequest(bb, vcm, conds, scalars, sampler, a["seed"], n)
    vols = sample_conditional(req) if conds else sample_unconditional(req)
    paths = []
    for sid, v in zip(ids, vols):
        p = out / f"{sid}.vol"
        write_volume(v, p)
        paths.append(p)
    return paths


def cmd_sample(args) -> int:
    if args.replay:
        manifest = json.loads(Path(args.replay).read_text())
        a = manifest["args"]
    else:
        if args.cond and not args.vcm:
            raise UsageError("--cond requires --vcm")
        if not args.backbone:
            raise UsageError("--backbone is required")
        a = {
            "backbone": args.backbone, "vcm": args.vcm, "cond": args.cond, "n": args.n, "steps": args.steps,
            "eta": args.eta, "seed": args.seed, "modalities": args.modalities.split(",") if args.modalities else None,
            "lr_factor": args.lr_factor, "covariates": args.covariates,
        }
    out = _prepare_out(args.out, args.force)
    _setup_logging(None)
    paths = _sample_impl(a, out)
    manifest = {
        "args": a,
        "checkpoints": {k: {"path": str(a[k]), "sha256": _sha256(a[k])} for k in ("backbone", "vcm") if a.get(k)},
        "outputs": [p.name for p in paths],
        "sampler": {"eta": a["eta"], "num_inference_steps": a["steps"]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("wrote %d volumes to %s", len(paths), out)
    return EXIT_OK


def cmd_superres(args) -> int:
    if bool(args.lr_dir) == bool(args.degrade_from):
        raise UsageError("give exactly one of --lr-dir or --degrade-from")
    bb, _ = load_backbone(args.backbone)
    run = load_vcm(args.vcm)
    factors = tuple(run.config["vcm"]["lr_factors"])
    if "lr" not in run.vcm.modalities:
        raise ConfigError("the VCM was not trained with the 'lr' modality")
    if args.factor not in factors:
        raise ConfigError(f"factor {args.factor} not in trained family {list(factors)}")
    out = _prepare_out(args.out, args.force)
    _setup_logging(None)
    clip = (run.config["data"]["clip_lo"], run.config["data"]["clip_hi"])
    depth = bb.volume_shape[0]
    ids, lrs, gts = [], [], []
    if args.degrade_from:
        for sid in list_samples(args.degrade_from):
            hr = normalize_minmax(read_sample(args.degrade_from, sid).image, *clip)
            ids.append(sid)
            gts.append(hr.data)
            lrs.append(axial_downsample(hr, args.factor).data)
    else:
        for p in sorted(Path(args.lr_dir).glob("*.vol")):
            ids.append(p.stem)
            lrs.append(read_volume(p).data)
    cond = torch.cat([lr_condition(x, args.factor, depth) for x in lrs])
    req = GenerationRequest(bb, run.vcm, {"lr": cond}, None, SamplerConfig(args.eta, args.steps), args.seed, len(ids), factors)
    vols = sample_conditional(req)
    for sid, v in zip(ids, vols):
        write_volume(v, out / f"{sid}.vol")
    report: dict[str, Any] = {"factor": args.factor, "ids": ids}
    if gts:
        rows = {"method": [], "nearest": []}
        for gt, v, c in zip(gts, vols, cond):
            base = c[0].numpy()
            rows["method"].append({"mae": mae(gt, v.data), "ssim": ssim(gt, v.data), "psnr": psnr(gt, v.data)})
            rows["nearest"].append({"mae": mae(gt, base), "ssim": ssim(gt, base), "psnr": psnr(gt, base)})
        table = {k: {m: float(np.mean([r[m] for r in v])) for m in ("mae", "ssim", "psnr")} for k, v in rows.items()}
        report.update({"per_sample": rows, "table": table})
        print(f"{'row':<10} {'MAE':>10} {'SSIM':>10} {'PSNR':>10}")
        for k, r in table.items():
            print(f"{k:<10} {r['mae']:>10.5f} {r['ssim']:>10.5f} {r['psnr']:>10.4f}")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    gen = Path(args.gen)
    if not gen.is_dir() or not any(gen.iterdir()):
        logger.error("generated directory %s is empty or missing", gen)
        return EXIT_RUNTIME
    metrics = args.metrics.split(",") if args.metrics else None
    kw = {"metrics": metrics} if metrics else {}
    cfg = _effective_config(args)
    clip = (cfg["data"]["clip_lo"], cfg["data"]["clip_hi"])
    report = evaluate_run(args.real, args.gen, mode=args.mode, extractor=args.extractor, clip=clip, extractor_seed=args.seed, **kw)
    if args.out:
        write_report(report, args.out)
    print(summary_table(report))
    return EXIT_OK if report["ok"] else EXIT_RUNTIME


# --------------------------------------------------------------------------- #
# parser


def _common(out_required: bool, out_help: str) -> argparse.ArgumentParser:
    c = _Parser(add_help=False)
    c.add_argument("--config", default=None, help="run config JSON")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=out_required, default=None, help=out_help)
    c.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common(True, "output directory")

    p = _Parser(prog="vcm3d", description="Volumetric conditioning of a frozen 3D latent diffusion prior.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a phantom dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--params", default=None, help="JSON object of phantom parameters")
    g.add_argument("--start", type=int, default=0, help="index of the first sample")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("train-backbone", parents=[common], help="pretrain the toy backbone")
    b.add_argument("--data", required=True)
    b.set_defaults(func=cmd_train_backbone)

    v = sub.add_parser("train-vcm", parents=[common], help="train a VCM on a frozen backbone")
    v.add_argument("--data", required=True)
    v.add_argument("--backbone", required=True)
    v.add_argument("--resume", default=None)
    v.set_defaults(func=cmd_train_vcm)

    s = sub.add_parser("sample", parents=[common], help="generate volumes")
    s.add_argument("--backbone")
    s.add_argument("--vcm")
    s.add_argument("--cond", help="dataset directory supplying condition volumes")
    s.add_argument("--modalities", help="comma-separated subset of the VCM's modalities")
    s.add_argument("--lr-factor", type=int, default=None)
    s.add_argument("--covariates", help="dataset directory whose ids and covariates an unconditional run should use")
    s.add_argument("--n", type=int, default=None, help="sample count (default: 1, or every id of --cond/--covariates)")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--replay", help="manifest.json of an earlier run to reproduce")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("superres", parents=[common], help="axial super-resolution")
    r.add_argument("--factor", type=int, required=True)
    r.add_argument("--lr-dir")
    r.add_argument("--degrade-from")
    r.add_argument("--vcm", required=True)
    r.add_argument("--backbone", required=True)
    r.add_argument("--steps", type=int, default=200)
    r.add_argument("--eta", type=float, default=0.0)
    r.set_defaults(func=cmd_superres)

    ev = sub.add_parser("eval", parents=[_common(False, "report JSON path")], help="score generated volumes")
    ev.add_argument("--real", required=True)
    ev.add_argument("--gen", required=True)
    ev.add_argument("--metrics", default=None, help="comma-separated subset of metrics")
    ev.add_argument("--mode", choices=["2D", "3D"], default="3D")
    ev.add_argument("--extractor", default="random_conv")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not logger.handlers:
        _setup_logging(None)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParameterError, ShapeError) as exc:
        logger.error("error: %s", exc)
        return EXIT_USAGE
    except (NumericError, StateError, FormatError, FileNotFoundError) as exc:
        logger.error("runtime error: %s", exc)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
