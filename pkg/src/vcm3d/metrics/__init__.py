"""Alignment and fidelity metrics."""

from __future__ import annotations

from .evaluate import evaluate_run, summary_table, write_report
from .frechet import FeatureExtractor, RandomConvExtractor, frechet_distance, get_extractor, register_extractor
from .overlap import assd, dice, directed_surface_distances, hd95, skull_dist
from .similarity import mae, ms_ssim, psnr, ssim

__all__ = [
    "FeatureExtractor", "RandomConvExtractor", "assd", "dice", "directed_surface_distances", "evaluate_run",
    "frechet_distance", "get_extractor", "hd95", "mae", "ms_ssim", "psnr", "register_extractor", "skull_dist",
    "ssim", "summary_table", "write_report",
]
