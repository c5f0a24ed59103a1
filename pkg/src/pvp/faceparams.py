"""Face parameter types, temporal smoothing, clustering features, and region masks.

Conventions: yaw/pitch are stored in degrees, neck/jaw poses in radians,
expression coefficients are dimensionless. All angle conversions happen here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

# Flat-vector layout shared by serialization, the toy backend and the mappers.
PARAM_DIM = 58
YAW_IDX = 0
PITCH_IDX = 1
NECK_SLICE = slice(2, 5)
JAW_SLICE = slice(5, 8)
EXPR_SLICE = slice(8, 58)

PVPF_MAGIC = b"PVPF"
PVPF_VERSION = 1


@dataclass(frozen=True)
class FaceParams:
    """Head-pose and expression coefficients for a single frame."""

    yaw_deg: float
    pitch_deg: float
    neck_pose: np.ndarray  # (3,) radians
    jaw_pose: np.ndarray   # (3,) radians
    expression: np.ndarray # (50,)

    def __post_init__(self):
        object.__setattr__(self, "neck_pose", np.asarray(self.neck_pose, dtype=np.float64))
        object.__setattr__(self, "jaw_pose", np.asarray(self.jaw_pose, dtype=np.float64))
        object.__setattr__(self, "expression", np.asarray(self.expression, dtype=np.float64))
        if self.neck_pose.shape != (3,):
            raise ValueError(f"neck_pose must have 3 entries, got {self.neck_pose.shape}")
        if self.jaw_pose.shape != (3,):
            raise ValueError(f"jaw_pose must have 3 entries, got {self.jaw_pose.shape}")
        if self.expression.shape != (50,):
            raise ValueError(f"expression must have 50 entries, got {self.expression.shape}")
        vec = self.to_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("face parameters must be finite")

    def to_vector(self) -> np.ndarray:
        """Flatten to the canonical 58-vector [yaw, pitch, neck, jaw, expression]."""
        vec = np.empty(PARAM_DIM, dtype=np.float64)
        vec[YAW_IDX] = self.yaw_deg
        vec[PITCH_IDX] = self.pitch_deg
        vec[NECK_SLICE] = self.neck_pose
        vec[JAW_SLICE] = self.jaw_pose
        vec[EXPR_SLICE] = self.expression
        return vec

    @staticmethod
    def from_vector(vec) -> "FaceParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (PARAM_DIM,):
            raise ValueError(f"expected a {PARAM_DIM}-vector, got shape {vec.shape}")
        return FaceParams(
            yaw_deg=float(vec[YAW_IDX]),
            pitch_deg=float(vec[PITCH_IDX]),
            neck_pose=vec[NECK_SLICE].copy(),
            jaw_pose=vec[JAW_SLICE].copy(),
            expression=vec[EXPR_SLICE].copy(),
        )


@dataclass(frozen=True)
class Image:
    """Row-major H x W x 3 image with channel values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        if px.min() < -1e-9 or px.max() > 1 + 1e-9:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


class FaceParamEstimator(Protocol):
    """Capability interface for reading face parameters off an image."""

    differentiable: bool

    def estimate(self, image: Image) -> FaceParams: ...


@dataclass(frozen=True)
class SmoothingConfig:
    kernel_sigma_frames: float = 2.0
    window_radius_frames: int = 6

    def __post_init__(self):
        if self.kernel_sigma_frames <= 0:
            raise ValueError("kernel_sigma_frames must be positive")
        if self.window_radius_frames < 1:
            raise ValueError("window_radius_frames must be a positive integer")


def smooth_trajectories(series, cfg: SmoothingConfig = SmoothingConfig()) -> np.ndarray:
    """Gaussian-smooth a per-frame sequence along the time axis.

    Windows are clamped to the sequence and the truncated kernel is
    renormalized, so constants (and endpoints) do not drift.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite sample")
    n = arr.shape[0]
    r = cfg.window_radius_frames
    offsets = np.arange(-r, r + 1)
    kernel = np.exp(-0.5 * (offsets / cfg.kernel_sigma_frames) ** 2)
    out = np.empty_like(arr)
    for t in range(n):
        lo = max(0, t - r)
        hi = min(n - 1, t + r)
        w = kernel[(lo - t) + r : (hi - t) + r + 1]
        w = w / w.sum()
        window = arr[lo : hi + 1]
        out[t] = np.tensordot(w, window, axes=(0, 0))
    return out


def smooth_params(params: Sequence[FaceParams], cfg: SmoothingConfig = SmoothingConfig()) -> list[FaceParams]:
    """Apply Gaussian smoothing to every channel of a FaceParams sequence."""
    mat = np.stack([p.to_vector() for p in params])
    smoothed = smooth_trajectories(mat, cfg)
    return [FaceParams.from_vector(row) for row in smoothed]


def stack_features(params: Sequence[FaceParams]) -> np.ndarray:
    """Stack per-frame [yaw, pitch, expression(50)] into an N x 52 matrix."""
    if len(params) == 0:
        raise ValueError("empty input")
    return np.stack([
        np.concatenate(([p.yaw_deg, p.pitch_deg], p.expression)) for p in params
    ])


def unstack_features(features: np.ndarray) -> list[tuple[float, float, np.ndarray]]:
    """Inverse of stack_features: rows back to (yaw, pitch, expression)."""
    features = np.asarray(features, dtype=np.float64)
    return [(float(r[0]), float(r[1]), r[2:].copy()) for r in features]


def standardize(features: np.ndarray):
    """Z-score feature columns for clustering.

    Returns (standardized, mean, std, degenerate) where degenerate flags
    columns with std < 1e-12; those are passed through centered only.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be a non-empty 2-D matrix")
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    degenerate = std < 1e-12
    divisor = np.where(degenerate, 1.0, std)
    return (features - mean) / divisor, mean, std, degenerate


@dataclass(frozen=True)
class RegionMask:
    """Binary H x W mask; excluded regions (eyes, mouth) are zeroed."""

    mask: np.ndarray
    excluded_regions: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        object.__setattr__(self, "mask", m)
        if m.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("mask must be binary")

    def apply(self, image: Image) -> np.ndarray:
        if image.pixels.shape[:2] != self.mask.shape:
            raise ValueError("mask dims do not match image")
        return image.pixels * self.mask[:, :, None]


class FaceLayout(Protocol):
    """Backend-published source for expression-driven pixel regions."""

    def excluded_boxes(self, params: FaceParams, dims: tuple[int, int]): ...


def region_mask(params: FaceParams, dims: tuple[int, int], layout: FaceLayout | None) -> RegionMask:
    """Build the consistency-loss mask that excludes eye and mouth regions.

    The region source is backend-specific: the toy backend publishes exact
    rectangles derived from its face geometry.
    """
    h, w = dims
    if h <= 0 or w <= 0:
        raise ValueError("dims must be positive")
    if layout is None:
        raise ValueError("mask source unavailable")
    mask = np.ones((h, w), dtype=np.float64)
    labels = []
    for label, r0, r1, c0, c1 in layout.excluded_boxes(params, dims):
        r0, r1 = max(0, r0), min(h, r1)
        c0, c1 = max(0, c0), min(w, c1)
        mask[r0:r1, c0:c1] = 0.0
        labels.append(label)
    return RegionMask(mask=mask, excluded_regions=tuple(labels))


def save_params(path, params: Sequence[FaceParams]) -> None:
    """Write a parameter sequence as a versioned columnar PVPF file."""
    rows = np.stack([p.to_vector() for p in params]).astype("<f4")
    with open(path, "wb") as f:
        f.write(PVPF_MAGIC)
        f.write(struct.pack("<HI", PVPF_VERSION, rows.shape[0]))
        f.write(rows.tobytes())


def load_params(path) -> list[FaceParams]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PVPF_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {PVPF_MAGIC!r}")
        version, n = struct.unpack("<HI", f.read(6))
        if version != PVPF_VERSION:
            raise ValueError(f"unsupported PVPF version {version}, expected {PVPF_VERSION}")
        data = np.frombuffer(f.read(n * PARAM_DIM * 4), dtype="<f4")
    if data.size != n * PARAM_DIM:
        raise ValueError("truncated PVPF payload")
    return [FaceParams.from_vector(row) for row in data.reshape(n, PARAM_DIM).astype(np.float64)]
