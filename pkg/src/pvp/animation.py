"""Cross-subject reenactment and latent-direction appearance edits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .faceparams import FaceParams, Image
from .genbackend import LatentCode
from .mappers import MapperBundle

PVPD_MAGIC = b"PVPD"


@dataclass(frozen=True)
class EditDirection:
    """A precomputed latent offset; scaled addition changes appearance."""

    name: str
    offsets: np.ndarray  # (L, D)
    strength_range: tuple = (-3.0, 3.0)

    def __post_init__(self):
        arr = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", arr)
        if arr.ndim != 2:
            raise ValueError("offsets must be LxD")
        if not np.all(np.isfinite(arr)):
            raise ValueError("offsets must be finite")


@dataclass
class DrivingSequence:
    """Driving parameters plus the statistics needed for renormalization."""

    params: Sequence[FaceParams]
    driving_mean: np.ndarray | None = None   # (53,) over (jaw, expression)
    driving_std: np.ndarray | None = None
    source_mean: np.ndarray | None = None
    source_std: np.ndarray | None = None
    pose_driving_mean: np.ndarray | None = None  # (2,) over (pitch, yaw)
    pose_driving_std: np.ndarray | None = None
    pose_source_mean: np.ndarray | None = None
    pose_source_std: np.ndarray | None = None

    def has_stats(self) -> bool:
        return all(v is not None for v in (
            self.driving_mean, self.driving_std, self.source_mean, self.source_std))


def make_driving_sequence(params: Sequence[FaceParams], bundle: MapperBundle) -> DrivingSequence:
    """Pair a driving parameter sequence with stats from it and the bundle's video."""
    if len(params) == 0:
        return DrivingSequence(params=params, driving_mean=np.zeros(53),
                               driving_std=np.ones(53), source_mean=bundle.jawexpr_mean,
                               source_std=bundle.jawexpr_std,
                               pose_driving_mean=np.zeros(2), pose_driving_std=np.ones(2),
                               pose_source_mean=bundle.pose_mean, pose_source_std=bundle.pose_std)
    je = np.stack([np.concatenate([p.jaw_pose, p.expression]) for p in params])
    pose = np.stack([[p.pitch_deg, p.yaw_deg] for p in params])
    return DrivingSequence(
        params=params,
        driving_mean=je.mean(axis=0), driving_std=je.std(axis=0),
        source_mean=bundle.jawexpr_mean, source_std=bundle.jawexpr_std,
        pose_driving_mean=pose.mean(axis=0), pose_driving_std=pose.std(axis=0),
        pose_source_mean=bundle.pose_mean, pose_source_std=bundle.pose_std,
    )


def renormalize_driving(x, driving_mean, driving_std, source_mean, source_std) -> np.ndarray:
    """Map driving features onto the source distribution, dimension by dimension."""
    x = np.asarray(x, dtype=np.float64)
    mu_d = np.asarray(driving_mean, dtype=np.float64)
    sd_d = np.maximum(np.asarray(driving_std, dtype=np.float64), 1e-6)
    mu_s = np.asarray(source_mean, dtype=np.float64)
    sd_s = np.asarray(source_std, dtype=np.float64)
    return (x - mu_d) / sd_d * sd_s + mu_s


def reenact(bundle: MapperBundle, driving: DrivingSequence,
            renormalize_pose: bool = True) -> list[Image]:
    """Drive the avatar with another sequence's coefficients, renormalized."""
    if not driving.has_stats():
        raise ValueError("stats required for cross-subject driving")
    frames = []
    for p in driving.params:
        je = renormalize_driving(
            np.concatenate([p.jaw_pose, p.expression]),
            driving.driving_mean, driving.driving_std,
            driving.source_mean, driving.source_std)
        pitch, yaw = p.pitch_deg, p.yaw_deg
        if renormalize_pose and driving.pose_driving_mean is not None:
            pitch, yaw = renormalize_driving(
                np.array([pitch, yaw]),
                driving.pose_driving_mean, driving.pose_driving_std,
                driving.pose_source_mean, driving.pose_source_std)
        frames.append(bundle.render(FaceParams(
            yaw_deg=float(yaw), pitch_deg=float(pitch), neck_pose=p.neck_pose,
            jaw_pose=je[:3], expression=je[3:])))
    return frames


def apply_edit(w_final: LatentCode, edit: EditDirection, strength: float) -> LatentCode:
    """Add a scaled edit direction to the final latent."""
    if w_final.layers.shape != edit.offsets.shape:
        raise ValueError(
            f"shape mismatch: latent {w_final.layers.shape} vs direction {edit.offsets.shape}")
    return LatentCode(layers=w_final.layers + strength * edit.offsets)


def save_directions(path, directions: Sequence[EditDirection]) -> None:
    """Write named direction records in the PVPD multi-record format."""
    with open(path, "wb") as f:
        f.write(PVPD_MAGIC)
        f.write(struct.pack("<I", len(directions)))
        for d in directions:
            name_b = d.name.encode()
            L, D = d.offsets.shape
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<HH", L, D))
            f.write(d.offsets.astype("<f4").tobytes())


def load_directions(path, profile=None) -> list[EditDirection]:
    """Read a PVPD file; if a profile is given, validate every record against it."""
    out = []
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PVPD_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {PVPD_MAGIC!r}")
        (count,) = struct.unpack("<I", f.read(4))
        for i in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            L, D = struct.unpack("<HH", f.read(4))
            data = np.frombuffer(f.read(L * D * 4), dtype="<f4")
            if data.size != L * D:
                raise ValueError(f"truncated direction record {name!r}")
            if profile is not None and (L, D) != (profile.layers, profile.dim):
                raise ValueError(
                    f"direction {name!r} has shape ({L}, {D}), "
                    f"profile expects ({profile.layers}, {profile.dim})")
            out.append(EditDirection(name=name, offsets=data.reshape(L, D).astype(np.float64)))
    return out
