"""Image metrics, dataset split protocols, masked evaluation, and reports.

The perceptual column is the desk-scale pyramid stand-in and is labeled
"perceptual_proxy" everywhere so its numbers are never mistaken for a
pretrained perceptual metric's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .faceparams import Image
from .perceptual import PyramidPerceptual

PSNR_INFINITE = float("inf")

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2  # stability constants for dynamic range 1.0
_C2 = 0.03 ** 2


def _check_pair(a: Image, b: Image):
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image dims differ: {a.pixels.shape} vs {b.pixels.shape}")


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; +inf when identical."""
    _check_pair(a, b)
    mse = float(((a.pixels - b.pixels) ** 2).mean())
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(1.0 / mse)


def _ssim_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2
    g = np.exp(-0.5 * ((np.arange(_SSIM_WINDOW) - half) / _SSIM_SIGMA) ** 2)
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: Image, b: Image) -> float:
    """Channel-averaged windowed SSIM (11x11 Gaussian window, sigma 1.5)."""
    _check_pair(a, b)
    h, w = a.pixels.shape[:2]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(f"image smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    win = _ssim_window()
    vals = []
    for c in range(3):
        x = a.pixels[:, :, c]
        y = b.pixels[:, :, c]
        mu_x = fftconvolve(x, win, mode="valid")
        mu_y = fftconvolve(y, win, mode="valid")
        xx = fftconvolve(x * x, win, mode="valid") - mu_x ** 2
        yy = fftconvolve(y * y, win, mode="valid") - mu_y ** 2
        xy = fftconvolve(x * y, win, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + _C1) * (2 * xy + _C2)
        den = (mu_x ** 2 + mu_y ** 2 + _C1) * (xx + yy + _C2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def perceptual_proxy(a: Image, b: Image, metric=None) -> float:
    metric = metric or PyramidPerceptual()
    return metric.distance(a, b)


def masked_metrics(a: Image, b: Image, alpha_mask) -> tuple[float, float, float]:
    """(psnr, ssim, perceptual_proxy) restricted to the masked face region.

    PSNR uses mask-weighted MSE; SSIM runs on the mask's tight bounding box;
    the perceptual proxy compares the masked images over black.
    """
    _check_pair(a, b)
    m = np.asarray(alpha_mask, dtype=np.float64)
    if m.shape != a.pixels.shape[:2]:
        raise ValueError("mask dims do not match images")
    if m.min() < 0 or m.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    total = m.sum()
    if total == 0:
        raise ValueError("empty mask")

    sq = ((a.pixels - b.pixels) ** 2).mean(axis=2)
    mse = float((m * sq).sum() / total)
    psnr_val = PSNR_INFINITE if mse == 0.0 else 10.0 * math.log10(1.0 / mse)

    rows = np.nonzero(m.any(axis=1))[0]
    cols = np.nonzero(m.any(axis=0))[0]
    crop_a = Image(pixels=a.pixels[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1])
    crop_b = Image(pixels=b.pixels[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1])
    ssim_val = ssim(crop_a, crop_b)

    masked_a = Image(pixels=a.pixels * m[:, :, None])
    masked_b = Image(pixels=b.pixels * m[:, :, None])
    return psnr_val, ssim_val, perceptual_proxy(masked_a, masked_b)


@dataclass(frozen=True)
class SplitSpec:
    protocol: str = "nha"  # nha | nbs | custom
    train_range: tuple | None = None  # half-open, custom protocol only
    eval_range: tuple | None = None

    def __post_init__(self):
        if self.protocol not in ("nha", "nbs", "custom"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "custom" and (self.train_range is None or self.eval_range is None):
            raise ValueError("custom protocol requires explicit ranges")


def split_dataset(n_frames: int, spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Train/eval frame indices under the named protocol."""
    if spec.protocol == "nha":
        if n_frames < 1450:
            raise ValueError(f"nha protocol needs at least 1450 frames, got {n_frames}")
        return list(range(0, 750)), list(range(750, 1450))
    if spec.protocol == "nbs":
        if n_frames < 501:
            raise ValueError(f"nbs protocol needs at least 501 frames, got {n_frames}")
        return list(range(0, n_frames - 500)), list(range(n_frames - 500, n_frames))
    t0, t1 = spec.train_range
    e0, e1 = spec.eval_range
    if not (0 <= t0 <= t1 <= n_frames and 0 <= e0 <= e1 <= n_frames):
        raise ValueError("custom ranges exceed the sequence length")
    if max(t0, e0) < min(t1, e1):
        raise ValueError("train and eval ranges overlap")
    return list(range(t0, t1)), list(range(e0, e1))


@dataclass
class EvalReport:
    per_frame: dict            # metric name -> list of values
    aggregates: dict           # metric name -> mean
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, vals in self.per_frame.items():
            finite = [v for v in vals if math.isfinite(v)]
            agg = self.aggregates.get(name)
            if finite and agg is not None and math.isfinite(agg):
                if abs(agg - float(np.mean(vals))) > 1e-9 and all(math.isfinite(v) for v in vals):
                    raise ValueError(f"aggregate for {name} is not the per-frame mean")


def evaluate_frames(preds, gts, masks=None, perceptual=None, provenance=None) -> EvalReport:
    """Per-frame PSNR/SSIM/perceptual-proxy (and masked variants when masked)."""
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    if len(preds) == 0:
        raise ValueError("nothing to evaluate")
    metric = perceptual or PyramidPerceptual()
    per_frame = {"psnr": [], "ssim": [], "perceptual_proxy": []}
    if masks is not None:
        per_frame.update({"masked_psnr": [], "masked_ssim": [], "masked_perceptual_proxy": []})
    for i, (p, g) in enumerate(zip(preds, gts)):
        per_frame["psnr"].append(psnr(p, g))
        per_frame["ssim"].append(ssim(p, g))
        per_frame["perceptual_proxy"].append(metric.distance(p, g))
        if masks is not None:
            mp, ms, ml = masked_metrics(p, g, masks[i])
            per_frame["masked_psnr"].append(mp)
            per_frame["masked_ssim"].append(ms)
            per_frame["masked_perceptual_proxy"].append(ml)
    aggregates = {name: float(np.mean(vals)) for name, vals in per_frame.items()}
    prov = {"resampler": "bilinear", "perceptual": "pyramid-proxy"}
    prov.update(provenance or {})
    return EvalReport(per_frame=per_frame, aggregates=aggregates, provenance=prov)


def report_text(report: EvalReport, method: str = "ours") -> str:
    """Human-readable table with one row per method (quality-table shape)."""
    agg = report.aggregates
    lines = [
        f"{'Method':<10} {'PSNR':>8} {'PerceptualProxy':>16} {'SSIM':>8}",
        f"{method:<10} {agg['psnr']:>8.2f} {agg['perceptual_proxy']:>16.4f} {agg['ssim']:>8.4f}",
    ]
    if "masked_psnr" in agg:
        lines.append(
            f"{method + ' (masked)':<10} {agg['masked_psnr']:>8.2f} "
            f"{agg['masked_perceptual_proxy']:>16.4f} {agg['masked_ssim']:>8.4f}")
    lines.append("")
    lines.append(f"frames evaluated: {len(report.per_frame['psnr'])}")
    for key, val in report.provenance.items():
        lines.append(f"provenance {key}: {val}")
    return "\n".join(lines)


def report_machine(report: EvalReport) -> str:
    """Line-delimited key/value record of aggregates and per-frame values."""
    lines = []
    for key, val in report.provenance.items():
        lines.append(f"provenance.{key}={val}")
    for name, val in report.aggregates.items():
        lines.append(f"aggregate.{name}={val!r}")
    n = len(next(iter(report.per_frame.values())))
    for i in range(n):
        parts = [f"frame={i}"]
        for name, vals in report.per_frame.items():
            parts.append(f"{name}={vals[i]!r}")
        lines.append(" ".join(parts))
    return "\n".join(lines)
