"""Spatial control of frozen 3D latent diffusion models with a volumetric conditioning module."""

from __future__ import annotations

__version__ = "0.1.0"
