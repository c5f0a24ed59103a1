"""Desk-scale perceptual and identity distances behind pluggable interfaces.

Real deployments swap in pretrained networks; these stand-ins are smooth,
symmetric, zero on identical inputs, and differentiable, which is all the
training and evaluation machinery relies on.
"""

from __future__ import annotations

from typing import Protocol

import torch
import torch.nn.functional as F

from .faceparams import Image

_PYR_KERNEL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=torch.float64) / 16.0


class PerceptualMetric(Protocol):
    differentiable: bool

    def distance(self, a: Image, b: Image) -> float: ...

    def distance_tensor(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


class IdentityEmbedder(Protocol):
    differentiable: bool

    def distance(self, a: Image, b: Image) -> float: ...

    def distance_tensor(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


def _to_nchw(x: torch.Tensor) -> torch.Tensor:
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    return x.permute(0, 3, 1, 2), squeeze


def _pyr_down(x: torch.Tensor) -> torch.Tensor:
    """One Gaussian-pyramid level: binomial blur then stride-2 subsample."""
    c = x.shape[1]
    kx = _PYR_KERNEL.reshape(1, 1, 1, 5).expand(c, 1, 1, 5)
    ky = _PYR_KERNEL.reshape(1, 1, 5, 1).expand(c, 1, 5, 1)
    x = F.pad(x, (2, 2, 0, 0), mode="reflect")
    x = F.conv2d(x, kx, groups=c)
    x = F.pad(x, (0, 0, 2, 2), mode="reflect")
    x = F.conv2d(x, ky, groups=c, stride=(2, 1))
    return x[:, :, :, ::2]


class PyramidPerceptual:
    """Mean-squared distance averaged over a 3-level Gaussian pyramid."""

    differentiable = True

    def __init__(self, levels: int = 3):
        self.levels = levels

    def distance_tensor(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        xa, squeeze = _to_nchw(a)
        xb, _ = _to_nchw(b)
        total = 0.0
        for lvl in range(self.levels):
            total = total + (xa - xb).pow(2).mean(dim=(1, 2, 3))
            if lvl + 1 < self.levels:
                xa, xb = _pyr_down(xa), _pyr_down(xb)
        out = total / self.levels
        return out[0] if squeeze else out

    def distance(self, a: Image, b: Image) -> float:
        with torch.no_grad():
            return float(self.distance_tensor(
                torch.tensor(a.pixels, dtype=torch.float64),
                torch.tensor(b.pixels, dtype=torch.float64),
            ))


class SketchIdentity:
    """Identity embedding: coarse average-pooled grid over the sketch region.

    The parameter band row is skipped so identity reacts to the drawn face,
    not to the encoded coefficients.
    """

    differentiable = True

    def __init__(self, band_rows: int = 1, grid: int = 4):
        self.band_rows = band_rows
        self.grid = grid

    def embed_tensor(self, img: torch.Tensor) -> torch.Tensor:
        x, squeeze = _to_nchw(img[..., self.band_rows :, :, :])
        emb = F.adaptive_avg_pool2d(x, self.grid).flatten(1)
        return emb[0] if squeeze else emb

    def distance_tensor(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return (self.embed_tensor(a) - self.embed_tensor(b)).pow(2).mean(dim=-1)

    def distance(self, a: Image, b: Image) -> float:
        with torch.no_grad():
            return float(self.distance_tensor(
                torch.tensor(a.pixels, dtype=torch.float64),
                torch.tensor(b.pixels, dtype=torch.float64),
            ))
