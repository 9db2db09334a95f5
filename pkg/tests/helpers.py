"""Independent reference implementations used as oracles by the test suite.

Everything here is written for clarity, not speed: plain loops over voxels,
windows and point pairs.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from vcm3d.training import vcm_loss
from vcm3d.vcm import modulate


# --------------------------------------------------------------------------- #
# surface distances


def border_voxels(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Foreground voxels with at least one face neighbour outside the mask (or the grid)."""
    out = []
    D, H, W = mask.shape
    for z, y, x in zip(*np.nonzero(mask)):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < D and 0 <= ny < H and 0 <= nx < W) or not mask[nz, ny, nx]:
                out.append((int(z), int(y), int(x)))
                break
    return out


def directed_brute(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    pa = np.asarray(border_voxels(a), dtype=np.float64) * np.asarray(spacing)
    pb = np.asarray(border_voxels(b), dtype=np.float64) * np.asarray(spacing)
    # all pairs, no distance transform
    return np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)).min(1)


def percentile_linear(values: np.ndarray, q: float) -> float:
    v = np.sort(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (v[hi] - v[lo]) * (pos - lo))


def hd95_brute(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return max(percentile_linear(directed_brute(a, b, spacing), 95), percentile_linear(directed_brute(b, a, spacing), 95))


def assd_brute(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    d = np.concatenate([directed_brute(a, b, spacing), directed_brute(b, a, spacing)])
    return float(d.sum() / len(d))


def dice_brute(a, b) -> float:
    inter = sum(1 for i in np.ndindex(a.shape) if a[i] and b[i])
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def skull_dist_brute(r, g) -> float:
    tot = 0.0
    for i in np.ndindex(r.shape):
        tot += (float(r[i]) - float(g[i])) ** 2
    return tot / r.size


# --------------------------------------------------------------------------- #
# SSIM


def ssim_sliding(a: np.ndarray, b: np.ndarray, window: int = 7, data_range: float = 1.0, k1=0.01, k2=0.03) -> float:
    """Mean SSIM over every valid window position, moments computed per window."""
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    D, H, W = a.shape
    for z, y, x in itertools.product(range(D - window + 1), range(H - window + 1), range(W - window + 1)):
        pa = a[z : z + window, y : y + window, x : x + window].astype(np.float64).ravel()
        pb = b[z : z + window, y : y + window, x : x + window].astype(np.float64).ravel()
        ma, mb = pa.mean(), pb.mean()
        va = ((pa - ma) ** 2).mean()
        vb = ((pb - mb) ** 2).mean()
        cov = ((pa - ma) * (pb - mb)).mean()
        vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# --------------------------------------------------------------------------- #
# Frechet


def frechet_diagonal(mu_a, sd_a, mu_b, sd_b) -> float:
    """Closed form when both covariances are diagonal."""
    return float(((np.asarray(mu_a) - mu_b) ** 2).sum() + ((np.asarray(sd_a) - sd_b) ** 2).sum())


# --------------------------------------------------------------------------- #
# gradient check


def smooth_head(vcm, seed: int = 0) -> None:
    """Give the split head biases of magnitude 1-2 and small weights.

    The L1 terms are not differentiable where gamma or beta cross zero;
    keeping every output well away from zero makes central differences valid.
    """
    g = torch.Generator().manual_seed(seed)
    head = vcm.split_head
    with torch.no_grad():
        head.weight.normal_(0.0, 0.05, generator=g)
        mag = torch.rand(head.bias.shape, generator=g, dtype=head.bias.dtype) + 1.0
        sign = torch.where(torch.arange(head.bias.numel()) % 2 == 0, 1.0, -1.0).to(head.bias.dtype)
        head.bias.copy_(mag * sign)


def output_margin(vcm, batch: dict) -> float:
    with torch.no_grad():
        gamma, beta = vcm(batch["zt"], batch["eps_t"], batch["conds"], batch["t"], batch["keep"])
    return min(gamma.abs().min().item(), beta.abs().min().item())


def vcm_loss_closure(vcm, batch: dict, lam: float):
    """Loss of ``vcm`` on a fixed batch of (z_t, eps_t, eps, conds, t, keep)."""

    def f() -> torch.Tensor:
        gamma, beta = vcm(batch["zt"], batch["eps_t"], batch["conds"], batch["t"], batch["keep"])
        return vcm_loss(batch["eps"], modulate(batch["eps_t"], gamma, beta), gamma, beta, lam)["total"]

    return f


def finite_difference_check(vcm, loss_fn, n_params: int, h: float = 1e-4, seed: int = 0):
    """Compare autograd against central differences on ``n_params`` sampled scalar parameters.

    Returns a list of ``(name, index, analytic, numeric, rel_error)``.
    """
    vcm.zero_grad()
    loss_fn().backward()
    named = [(n, p) for n, p in vcm.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    # every tensor gets at least one probe, the rest are spread by size
    picks = [(i, int(rng.integers(sizes[i]))) for i in range(len(named))]
    while len(picks) < n_params:
        i = int(rng.choice(len(named), p=sizes / sizes.sum()))
        picks.append((i, int(rng.integers(sizes[i]))))
    out = []
    with torch.no_grad():
        for i, k in picks:
            name, p = named[i]
            flat = p.view(-1)
            orig = flat[k].item()
            flat[k] = orig + h
            lp = loss_fn().item()
            flat[k] = orig - h
            lm = loss_fn().item()
            flat[k] = orig
            num = (lp - lm) / (2 * h)
            ana = p.grad.view(-1)[k].item()
            scale = max(abs(ana), abs(num), 1e-8)
            out.append((name, k, ana, num, abs(ana - num) / scale))
    return out
