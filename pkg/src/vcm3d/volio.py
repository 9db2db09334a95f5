"""Volume data model, the VOL1 container, procedural phantoms and degradations.

The VOL1 container is a 4-byte magic, a little-endian ``uint32`` header length,
a UTF-8 JSON header and a raw little-endian C-order payload.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

MAGIC = b"VOL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("u1"): "u8"}

VOLUME_FILES = ("image", "lv_mask", "brain_mask", "skull")


@dataclass
class Volume3D:
    """Dense scalar field on a voxel grid.

    ``data`` is ``[D, H, W]`` or ``[C, D, H, W]``; ``spacing`` is the physical
    voxel size in mm for the three spatial axes.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = ""

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4) or min(self.data.shape) <= 0:
            raise ShapeError(f"volume data must be 3D or 4D with positive axes, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ShapeError("spacing needs one entry per spatial axis")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[-3:]


@dataclass
class BinaryMask(Volume3D):
    """{0, 1}-valued ``uint8`` volume."""

    def __post_init__(self) -> None:
        super().__post_init__()
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if not np.all((data == 0) | (data == 1)):
                raise ParameterError("mask values must be exactly 0 or 1")
            data = data.astype(np.uint8)
        elif data.max(initial=0) > 1:
            raise ParameterError("mask values must be exactly 0 or 1")
        self.data = data

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


# --------------------------------------------------------------------------- #
# VOL1 container


def encode_array(data: np.ndarray, spacing=()) -> bytes:
    """Serialize an array (f32 or u8) into VOL1 bytes."""
    arr = np.asarray(data)
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        arr = arr.astype("u1")
        dtype = "u8"
    elif arr.dtype.kind == "f":
        arr = arr.astype("<f4")
        dtype = "f32"
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = {
        "dtype": dtype,
        "shape": [int(s) for s in arr.shape],
        "spacing": [float(s) for s in spacing],
        "order": "C",
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + np.ascontiguousarray(arr).tobytes()


def decode_array(buf: bytes) -> tuple[np.ndarray, tuple[float, ...]]:
    """Inverse of :func:`encode_array`; returns ``(data, spacing)``."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if 8 + hlen > len(buf):
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if header.get("order", "C") != "C":
        raise FormatError("only C order payloads are supported")
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    payload = buf[8 + hlen :]
    expected = math.prod(shape) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return data, tuple(float(s) for s in header.get("spacing", []))


def write_volume(v: Volume3D, path: str | Path) -> None:
    Path(path).write_bytes(encode_array(v.data, v.spacing))


def read_volume(path: str | Path) -> Volume3D:
    """Read a VOL1 file. ``u8`` payloads come back as :class:`BinaryMask`."""
    path = Path(path)
    data, spacing = decode_array(path.read_bytes())
    if len(spacing) != 3:
        spacing = (1.0, 1.0, 1.0)
    if data.dtype == np.uint8 and data.max(initial=0) <= 1:
        return BinaryMask(data, spacing, path.stem)
    return Volume3D(data, spacing, path.stem)


# --------------------------------------------------------------------------- #
# Phantoms


@dataclass
class PhantomParams:
    """Generation parameters. Radii and offsets are fractions of half the grid size.

    Intensities are on a raw 0-255 scale; the dataset loader min-max
    normalizes them with the configured clip range.
    """

    brain_radius: tuple[float, float, float] = (0.62, 0.70, 0.62)
    brain_jitter: float = 0.04
    skull_thickness: float = 0.16
    lv_radius_range: tuple[float, float] = (0.28, 0.42)
    lv_center_jitter: float = 0.2
    max_rotation: float = math.pi / 6
    bg_level: float = 0.0
    lv_level: tuple[float, float] = (40.0, 80.0)
    brain_level: tuple[float, float] = (150.0, 190.0)
    skull_level: tuple[float, float] = (215.0, 250.0)
    noise_sigma: float = 3.0

    @property
    def lv_threshold(self) -> float:
        """Normalized intensity separating ventricle from parenchyma.

        Midpoint between the brightest normalized ventricle and the darkest
        normalized parenchyma (max-normalized by the skull, noise at 3 sigma).
        """
        lv_hi = self.lv_level[1] / self.skull_level[0]
        brain_lo = self.brain_level[0] / (self.skull_level[1] + 3.0 * self.noise_sigma)
        return 0.5 * (lv_hi + brain_lo)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PhantomParams:
        known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class PhantomSample:
    image: Volume3D
    lv_mask: BinaryMask
    brain_mask: BinaryMask
    skull_image: Volume3D
    params: dict[str, Any] = field(default_factory=dict)


def _ellipsoid(size: int, center, radii, angle: float = 0.0) -> np.ndarray:
    """Voxel-center inclusion test for an ellipsoid rotated about the axial axis."""
    g = np.arange(size, dtype=np.float64)
    z, y, x = np.meshgrid(g - center[0], g - center[1], g - center[2], indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    yr = c * y + s * x
    xr = -s * y + c * x
    return (z / radii[0]) ** 2 + (yr / radii[1]) ** 2 + (xr / radii[2]) ** 2 <= 1.0


def expected_lv_fraction(size: int, params: PhantomParams | None = None) -> float:
    """Nominal ventricle volume fraction, from the mean of the uniform radius draws."""
    p = params or PhantomParams()
    half = size / 2.0
    r = 0.5 * (p.lv_radius_range[0] + p.lv_radius_range[1]) * half
    return 4.0 / 3.0 * math.pi * r**3 / size**3


def generate_phantom(seed: int, size: int = 32, params: PhantomParams | None = None) -> PhantomSample:
    """Nested-ellipsoid head phantom: ventricle inside brain inside a skull shell.

    Every random quantity is drawn from ``np.random.default_rng(seed)`` in a
    fixed order, so ``(seed, size, params)`` fully determines the sample.
    """
    p = params or PhantomParams()
    if size < 16:
        raise ParameterError(f"size must be >= 16, got {size}")
    half = size / 2.0
    rng = np.random.default_rng(seed)
    center = np.full(3, (size - 1) / 2.0)

    brain_r = np.asarray(p.brain_radius) * half * (1.0 + rng.uniform(-p.brain_jitter, p.brain_jitter, 3))
    outer_r = brain_r + p.skull_thickness * half
    if np.any(outer_r > (size - 1) / 2.0 + 1e-9):
        raise ParameterError(f"skull radii {outer_r.tolist()} exceed the grid half-size {(size - 1) / 2.0}")
    lo, hi = p.lv_radius_range
    if hi <= 0 or lo < 0 or lo > hi:
        raise ParameterError("lv radius range must satisfy 0 <= lo <= hi and hi > 0")
    lv_r = rng.uniform(lo, hi, 3) * half
    if np.any(lv_r > brain_r):
        raise ParameterError("lv radii exceed brain radii")
    lv_c = center + rng.uniform(-p.lv_center_jitter, p.lv_center_jitter, 3) * half
    angle = rng.uniform(-p.max_rotation, p.max_rotation)
    levels = {
        "lv": rng.uniform(*p.lv_level),
        "brain": rng.uniform(*p.brain_level),
        "skull": rng.uniform(*p.skull_level),
    }

    brain = _ellipsoid(size, center, brain_r)
    head = _ellipsoid(size, center, outer_r)
    lv = _ellipsoid(size, lv_c, lv_r, angle) & brain
    if not lv.any():
        raise ParameterError("ventricle mask is empty; increase lv radii")
    skull = head & ~brain

    img = np.full((size,) * 3, p.bg_level, dtype=np.float64)
    img[skull] = levels["skull"]
    img[brain] = levels["brain"]
    img[lv] = levels["lv"]
    noise = rng.normal(0.0, p.noise_sigma, img.shape)
    img[head] += noise[head]
    img = img.astype(np.float32)

    meta = {
        "seed": int(seed),
        "size": int(size),
        "phantom": p.to_dict(),
        "brain_radii": brain_r.tolist(),
        "skull_radii": outer_r.tolist(),
        "lv_center": lv_c.tolist(),
        "lv_radii": lv_r.tolist(),
        "lv_angle": float(angle),
        "levels": {k: float(v) for k, v in levels.items()},
        "lv_threshold": p.lv_threshold,
        "lv_fraction": float(lv.mean()),
        "brain_fraction": float(brain.mean()),
    }
    return PhantomSample(
        image=Volume3D(img, name="image"),
        lv_mask=BinaryMask(lv.astype(np.uint8), name="lv_mask"),
        brain_mask=BinaryMask(brain.astype(np.uint8), name="brain_mask"),
        skull_image=Volume3D(np.where(skull, img, 0.0).astype(np.float32), name="skull"),
        params=meta,
    )


# --------------------------------------------------------------------------- #
# Preprocessing and degradations


def normalize_minmax(v: Volume3D, clip_lo: float = 0.0, clip_hi: float = 255.0) -> Volume3D:
    """Clip to ``[clip_lo, clip_hi]`` and map the clipped data's range onto [0, 1].

    A constant volume (after clipping) maps to all zeros.
    """
    if not clip_lo < clip_hi:
        raise ParameterError("clip_lo must be < clip_hi")
    x = np.clip(np.asarray(v.data, dtype=np.float64), clip_lo, clip_hi)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        out = np.zeros_like(x)
    else:
        out = (x - lo) / (hi - lo)
    return Volume3D(out.astype(np.float32), v.spacing, v.name)


def axial_downsample(v: Volume3D, factor: int) -> Volume3D:
    """Block-average along the axial axis (spatial axis 0).

    Trailing slices that do not fill a whole block are dropped.
    """
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return Volume3D(v.data.copy(), v.spacing, v.name)
    data = v.data
    ax = data.ndim - 3
    n = (data.shape[ax] // factor) * factor
    if n == 0:
        raise ParameterError("axial extent smaller than the factor")
    data = np.take(data, np.arange(n), axis=ax)
    shape = data.shape[:ax] + (n // factor, factor) + data.shape[ax + 1 :]
    out = data.reshape(shape).mean(axis=ax + 1, dtype=np.float64).astype(v.data.dtype)
    spacing = (v.spacing[0] * factor, v.spacing[1], v.spacing[2])
    return Volume3D(out, spacing, v.name)


def axial_upsample_nearest(v: Volume3D, factor: int, target: int | None = None) -> Volume3D:
    """Repeat each axial slice ``factor`` times; pad by edge replication up to ``target`` slices."""
    ax = v.data.ndim - 3
    out = np.repeat(v.data, factor, axis=ax)
    if target is not None and out.shape[ax] < target:
        pad = [(0, 0)] * out.ndim
        pad[ax] = (0, target - out.shape[ax])
        out = np.pad(out, pad, mode="edge")
    spacing = (v.spacing[0] / factor, v.spacing[1], v.spacing[2])
    return Volume3D(out, spacing, v.name)


FLIP_AXIS = 0


def axial_flip(v: Volume3D) -> Volume3D:
    """Mirror along the axial axis."""
    ax = v.data.ndim - 3 + FLIP_AXIS
    cls = type(v)
    return cls(np.flip(v.data, axis=ax).copy(), v.spacing, v.name)


# --------------------------------------------------------------------------- #
# Dataset directories


def write_sample(sample: PhantomSample, root: str | Path, sample_id: str) -> Path:
    d = Path(root) / sample_id
    d.mkdir(parents=True, exist_ok=True)
    write_volume(sample.image, d / "image.vol")
    write_volume(sample.lv_mask, d / "lv_mask.vol")
    write_volume(sample.brain_mask, d / "brain_mask.vol")
    write_volume(sample.skull_image, d / "skull.vol")
    (d / "meta.json").write_text(json.dumps(sample.params, indent=2, sort_keys=True))
    return d


def read_sample(root: str | Path, sample_id: str) -> PhantomSample:
    d = Path(root) / sample_id
    meta = json.loads((d / "meta.json").read_text())
    return PhantomSample(
        image=read_volume(d / "image.vol"),
        lv_mask=_as_mask(read_volume(d / "lv_mask.vol")),
        brain_mask=_as_mask(read_volume(d / "brain_mask.vol")),
        skull_image=read_volume(d / "skull.vol"),
        params=meta,
    )


def _as_mask(v: Volume3D) -> BinaryMask:
    return v if isinstance(v, BinaryMask) else BinaryMask(v.data, v.spacing, v.name)


def list_samples(root: str | Path) -> list[str]:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())


def sample_seed(root_seed: int, index: int) -> int:
    """Per-sample seed derived from the dataset seed."""
    return int(np.random.SeedSequence([int(root_seed), int(index)]).generate_state(1)[0])


def generate_dataset(
    root: str | Path, n: int, size: int, seed: int, params: PhantomParams | None = None, start: int = 0
) -> list[str]:
    """Write ``n`` phantoms plus a root ``manifest.json`` listing their seeds."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    p = params or PhantomParams()
    ids, seeds = [], {}
    for i in range(start, start + n):
        sid = f"sample_{i:04d}"
        s = sample_seed(seed, i)
        write_sample(generate_phantom(s, size, p), root, sid)
        ids.append(sid)
        seeds[sid] = s
    manifest = {"n": n, "size": size, "seed": seed, "start": start, "params": p.to_dict(), "samples": seeds}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return ids
