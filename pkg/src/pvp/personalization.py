"""Pivot selection, multi-image pivotal tuning, and the dilated-hull manifold."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .faceparams import FaceParams, Image, load_params, save_params, stack_features, standardize
from .genbackend import (
    LatentCode,
    ToyGenerator,
    load_latents,
    save_checkpoint,
    save_latents,
    toy_backend_from_checkpoint,
)
from .perceptual import PyramidPerceptual


class PivotSelectionWarning(UserWarning):
    pass


class PersonalizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PivotSet:
    frame_indices: tuple
    latents: tuple  # of LatentCode
    params: tuple   # of FaceParams

    def __post_init__(self):
        if len(set(self.frame_indices)) != len(self.frame_indices):
            raise ValueError("pivot frame indices must be unique")
        if not (len(self.frame_indices) == len(self.latents) == len(self.params)):
            raise ValueError("pivot fields must have equal length")
        if len(self.frame_indices) < 2:
            raise ValueError("need at least 2 pivots")


@dataclass
class PersonalizedManifold:
    """K pivot latents, the dilation beta, and the fine-tuned generator."""

    pivots: PivotSet
    beta: float
    backend: ToyGenerator
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        prof = self.backend.profile
        for lat in self.pivots.latents:
            if lat.shape != (prof.layers, prof.dim):
                raise ValueError("pivot latent does not match backend profile")

    @property
    def k(self) -> int:
        return len(self.pivots.latents)

    def pivot_tensor(self) -> torch.Tensor:
        return torch.tensor(np.stack([l.layers for l in self.pivots.latents]), dtype=torch.float64)

    def blend(self, alpha) -> LatentCode:
        alpha = np.asarray(alpha, dtype=np.float64)
        stacked = np.stack([l.layers for l in self.pivots.latents])
        return LatentCode(layers=np.tensordot(alpha, stacked, axes=(0, 0)))

    def sample_weights(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draws over the beta-dilated simplex via rescaled Dirichlet."""
        x = rng.dirichlet(np.ones(self.k), size=n)
        return -self.beta + x * (1.0 + self.k * self.beta)


@dataclass(frozen=True)
class PTIConfig:
    lpips_threshold: float = 0.03
    max_steps: int = 350
    lambda_l2: float = 1.0
    lambda_reg: float = 0.1
    locality_samples_per_step: int = 4
    locality_interp_range: tuple = (0.1, 0.9)
    step_size: float = 1e-3
    pivot_batch: int = 4
    budget_mode: str = "total"  # or "per_pivot": max_steps applies per pivot
    seed: int = 0

    def __post_init__(self):
        if self.lpips_threshold <= 0:
            raise ValueError("lpips_threshold must be positive")
        if self.budget_mode not in ("total", "per_pivot"):
            raise ValueError("budget_mode must be 'total' or 'per_pivot'")


def select_pivots(video_params: Sequence[FaceParams], k: int, seed: int = 0) -> list[int]:
    """Pick representative frame indices by k-means over pose/expression features.

    Features are z-scored per column (degrees and expression units differ by
    orders of magnitude), clustered with k-means++ initialized Lloyd
    iterations, and each non-empty cluster contributes the frame nearest its
    centroid. Duplicate winners collapse with a warning.
    """
    n = len(video_params)
    if k > n:
        raise ValueError("K exceeds frame count")
    if n < 2:
        raise ValueError("need at least 2 frames")
    feats, _, _, _ = standardize(stack_features(video_params))
    rng = np.random.default_rng(seed)

    centroids = _kmeans_pp_init(feats, k, rng)
    labels = None
    for _ in range(300):
        d2 = ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = feats[labels == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < 1e-6:
            break

    chosen = []
    for c in range(k):
        member_idx = np.nonzero(labels == c)[0]
        if len(member_idx) == 0:
            continue
        dists = ((feats[member_idx] - centroids[c]) ** 2).sum(axis=1)
        chosen.append(int(member_idx[dists.argmin()]))
    deduped = sorted(set(chosen))
    if len(deduped) < k:
        warnings.warn(
            f"selected {len(deduped)} distinct pivots for K={k} (duplicate feature rows)",
            PivotSelectionWarning,
        )
    return deduped


def _kmeans_pp_init(feats: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = feats.shape[0]
    centroids = np.empty((k, feats.shape[1]))
    centroids[0] = feats[rng.integers(n)]
    d2 = ((feats - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 1e-18:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids[c] = feats[idx]
        d2 = np.minimum(d2, ((feats - centroids[c]) ** 2).sum(axis=1))
    return centroids


def locality_regularizer(original_backend, tuned_backend, pivots: PivotSet,
                         cfg: PTIConfig, generator: torch.Generator | None = None,
                         perceptual=None) -> torch.Tensor:
    """Penalty keeping the tuned generator close to the original away from pivots.

    Random prior latents are pulled partway toward random pivots; the loss is
    the mean pixel MSE plus perceptual distance between the two generators'
    renders at those codes.
    """
    if original_backend.profile != tuned_backend.profile:
        raise ValueError("backends must share a profile")
    perceptual = perceptual or PyramidPerceptual()
    n = cfg.locality_samples_per_step
    z = original_backend.sample_prior(n, generator)
    pivot_stack = torch.tensor(
        np.stack([l.layers for l in pivots.latents]), dtype=torch.float64)
    pick = torch.randint(len(pivots.latents), (n,), generator=generator)
    lo, hi = cfg.locality_interp_range
    t = lo + (hi - lo) * torch.rand(n, 1, 1, dtype=torch.float64, generator=generator)
    codes = (1.0 - t) * z + t * pivot_stack[pick]
    with torch.no_grad():
        ref = original_backend.synthesize_tensor(codes)
    out = tuned_backend.synthesize_tensor(codes)
    l2 = (out - ref).pow(2).mean(dim=(-3, -2, -1))
    return (l2 + perceptual.distance_tensor(out, ref)).mean()


def personalize(backend: ToyGenerator, pivots: PivotSet, targets: Sequence[Image],
                cfg: PTIConfig = PTIConfig(), beta: float = 0.02, perceptual=None,
                progress=None) -> PersonalizedManifold:
    """Multi-image pivotal tuning: fit a cloned generator to the pivot frames.

    Minimizes the pivot-set mean of perceptual + weighted L2 reconstruction,
    plus the locality regularizer, until the mean perceptual distance drops
    below the threshold or the step budget runs out. The input backend is
    never mutated.
    """
    k = len(pivots.latents)
    if k == 0:
        raise PersonalizationError("zero pivots")
    if len(targets) != k:
        raise ValueError("need one target image per pivot")
    perceptual = perceptual or PyramidPerceptual()
    tuned = backend.clone()

    pivot_w = torch.tensor(np.stack([l.layers for l in pivots.latents]), dtype=torch.float64)
    target_px = torch.tensor(np.stack([im.pixels for im in targets]), dtype=torch.float64)
    gen = torch.Generator().manual_seed(cfg.seed)

    def mean_perceptual() -> float:
        with torch.no_grad():
            return float(perceptual.distance_tensor(
                tuned.synthesize_tensor(pivot_w), target_px).mean())

    max_steps = cfg.max_steps * (k if cfg.budget_mode == "per_pivot" else 1)
    provenance = {"beta": beta, "budget_mode": cfg.budget_mode,
                  "lpips_threshold": cfg.lpips_threshold, "max_steps": cfg.max_steps,
                  "lambda_l2": cfg.lambda_l2, "lambda_reg": cfg.lambda_reg,
                  "step_size": cfg.step_size, "seed": cfg.seed}

    if max_steps == 0:
        warnings.warn("PTI step budget is 0; returning the untuned clone", UserWarning)
        provenance.update(steps_run=0, converged=False,
                          final_mean_perceptual=mean_perceptual())
        return PersonalizedManifold(pivots, beta, tuned, provenance)

    theta = tuned.theta.requires_grad_(True)
    opt = torch.optim.Adam([theta], lr=cfg.step_size)
    steps_run = 0
    converged = False
    for step in range(max_steps + 1):
        current = mean_perceptual()
        if current < cfg.lpips_threshold:
            converged = True
            break
        if step == max_steps:
            break
        batch = torch.randint(k, (min(cfg.pivot_batch, k),), generator=gen)
        out = tuned.synthesize_tensor(pivot_w[batch])
        tgt = target_px[batch]
        recon = (perceptual.distance_tensor(out, tgt)
                 + cfg.lambda_l2 * (out - tgt).pow(2).mean(dim=(-3, -2, -1))).mean()
        loss = recon
        if cfg.lambda_reg > 0:
            loss = loss + cfg.lambda_reg * locality_regularizer(
                backend, tuned, pivots, cfg, generator=gen, perceptual=perceptual)
        if not torch.isfinite(loss):
            raise PersonalizationError(f"non-finite tuning loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps_run += 1
        if progress is not None:
            progress(step=steps_run, loss=float(loss))
    theta.requires_grad_(False)

    provenance.update(steps_run=steps_run, converged=converged,
                      final_mean_perceptual=mean_perceptual())
    return PersonalizedManifold(pivots, beta, tuned, provenance)


@dataclass(frozen=True)
class CoverageReport:
    counts: np.ndarray
    yaw_edges: np.ndarray
    pitch_edges: np.ndarray
    sample_poses: np.ndarray  # (n, 2) [yaw, pitch]
    pivot_poses: np.ndarray   # (k, 2)
    video_poses: np.ndarray | None


def pose_coverage_report(manifold: PersonalizedManifold, n_samples: int, seed: int = 0,
                         video_params: Sequence[FaceParams] | None = None,
                         bins: int = 24) -> CoverageReport:
    """Yaw/pitch histogram of random manifold samples, for coverage diagnostics."""
    if n_samples < 1:
        raise ValueError("empty histogram: n_samples must be >= 1")
    from .genbackend import ToyEstimator

    rng = np.random.default_rng(seed)
    alphas = manifold.sample_weights(n_samples, rng)
    pivot_stack = manifold.pivot_tensor()
    codes = torch.einsum("nk,kld->nld", torch.tensor(alphas, dtype=torch.float64), pivot_stack)
    estimator = ToyEstimator(manifold.backend.spec.param_band_rows)
    with torch.no_grad():
        p = estimator.estimate_tensor(manifold.backend.synthesize_tensor(codes)).numpy()
    sample_poses = p[:, :2]
    pivot_poses = np.array([[fp.yaw_deg, fp.pitch_deg] for fp in manifold.pivots.params])
    video_poses = None
    if video_params is not None:
        video_poses = np.array([[fp.yaw_deg, fp.pitch_deg] for fp in video_params])
    lo_yaw = min(sample_poses[:, 0].min(), pivot_poses[:, 0].min())
    hi_yaw = max(sample_poses[:, 0].max(), pivot_poses[:, 0].max())
    lo_pit = min(sample_poses[:, 1].min(), pivot_poses[:, 1].min())
    hi_pit = max(sample_poses[:, 1].max(), pivot_poses[:, 1].max())
    counts, yaw_edges, pitch_edges = np.histogram2d(
        sample_poses[:, 0], sample_poses[:, 1], bins=bins,
        range=[[lo_yaw - 1e-9, hi_yaw + 1e-9], [lo_pit - 1e-9, hi_pit + 1e-9]])
    return CoverageReport(counts, yaw_edges, pitch_edges, sample_poses, pivot_poses, video_poses)


# -- persistence ---------------------------------------------------------------

def save_manifold(manifold_dir, manifold: PersonalizedManifold) -> None:
    manifold_dir = Path(manifold_dir)
    manifold_dir.mkdir(parents=True, exist_ok=True)
    prof = manifold.backend.profile
    manifest = {
        "format": "pvp-manifold",
        "version": 1,
        "k": manifold.k,
        "beta": manifold.beta,
        "profile": {"layers": prof.layers, "dim": prof.dim, "height": prof.height,
                    "width": prof.width, "geometry_layers": prof.geometry_layers},
        "frame_indices": list(manifold.pivots.frame_indices),
        "provenance": manifold.provenance,
    }
    (manifold_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    save_latents(manifold_dir / "pivots.pvpw", manifold.pivots.latents)
    save_params(manifold_dir / "pivot_params.pvpf", manifold.pivots.params)
    save_checkpoint(manifold_dir / "generator.pvpg", manifold.backend)


def load_manifold(manifold_dir) -> PersonalizedManifold:
    manifold_dir = Path(manifold_dir)
    manifest = json.loads((manifold_dir / "manifest.json").read_text())
    if manifest.get("format") != "pvp-manifold":
        raise ValueError("not a manifold directory")
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported manifold version {manifest.get('version')}")
    backend = toy_backend_from_checkpoint(manifold_dir / "generator.pvpg")
    latents = tuple(load_latents(manifold_dir / "pivots.pvpw"))
    params = tuple(load_params(manifold_dir / "pivot_params.pvpf"))
    pivots = PivotSet(frame_indices=tuple(manifest["frame_indices"]),
                      latents=latents, params=params)
    return PersonalizedManifold(pivots, manifest["beta"], backend,
                                manifest.get("provenance", {}))
