"""Mapper training: reconstruction, disentanglement and locality losses.

Each training step renders the frame's reconstruction plus a second render
with perturbed jaw/expression inputs; matching the estimator's reading of
that perturbed render against the perturbed targets (while pinning its neck
pose and non-face pixels) is what separates expression control from head
pose. The tuned generator stays frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .faceparams import (
    EXPR_SLICE,
    JAW_SLICE,
    NECK_SLICE,
    PITCH_IDX,
    YAW_IDX,
    FaceParams,
    Image,
    RegionMask,
    region_mask,
)
from .genbackend import ToyEstimator
from .mappers import MapperBundle, compose_tensor, save_bundle
from .perceptual import PyramidPerceptual, SketchIdentity

TERM_NAMES = ("lpips", "l2", "id", "cons", "pose", "expr", "local")


@dataclass(frozen=True)
class LossWeights:
    lpips: float = 10.0
    l2: float = 10.0
    id: float = 0.5
    pose: float = 0.1
    expr: float = 0.1
    cons: float = 1.0
    local: float = 0.5

    def __post_init__(self):
        if min(self.lpips, self.l2, self.id, self.pose, self.expr, self.cons, self.local) < 0:
            raise ValueError("loss weights must be nonnegative")

    def as_dict(self):
        return {name: getattr(self, name) for name in TERM_NAMES}


@dataclass(frozen=True)
class PerturbationConfig:
    sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 50_000
    learning_rate: float = 5e-4
    batch_size: int = 4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 0  # 0 disables checkpointing
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def perturb_params(jaw_pose, expression, cfg: PerturbationConfig):
    """Additive Gaussian perturbation of (jaw, expression); deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    jaw = np.asarray(jaw_pose, dtype=np.float64)
    expr = np.asarray(expression, dtype=np.float64)
    return (jaw + cfg.sigma * rng.standard_normal(jaw.shape),
            expr + cfg.sigma * rng.standard_normal(expr.shape))


def loss_expression_match(estimated, target) -> float:
    """Squared L2 between estimated and target (jaw, expression) 53-vectors."""
    est = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in estimated])
    tgt = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in target])
    if est.shape != (53,) or tgt.shape != (53,):
        raise ValueError("expected (3-vector, 50-vector) pairs")
    return float(((est - tgt) ** 2).sum())


def loss_pose_consistency(neck_estimated, neck) -> float:
    """Squared L2 between the perturbed render's neck pose and the frame's."""
    a = np.asarray(neck_estimated, dtype=np.float64)
    b = np.asarray(neck, dtype=np.float64)
    if a.shape != (3,) or b.shape != (3,):
        raise ValueError("neck poses must be 3-vectors")
    return float(((a - b) ** 2).sum())


def loss_rgb_consistency(img_perturbed: Image, img_rendered: Image, mask: RegionMask) -> float:
    """Mask-weighted mean squared pixel difference outside the eye/mouth regions."""
    if img_perturbed.pixels.shape != img_rendered.pixels.shape:
        raise ValueError("image dims do not match")
    if mask.mask.shape != img_perturbed.pixels.shape[:2]:
        raise ValueError("mask dims do not match image")
    diff = mask.mask[:, :, None] * (img_perturbed.pixels - img_rendered.pixels)
    return float((diff ** 2).mean())


def loss_local(residual) -> float:
    """Squared L2 of the expression residual over all latent entries."""
    res = np.asarray(residual, dtype=np.float64)
    if not np.all(np.isfinite(res)):
        raise ValueError("residual must be finite")
    return float((res ** 2).sum())


def _frame_masks(bundle, params_list) -> torch.Tensor:
    layout = getattr(bundle.manifold.backend, "face_layout", None)
    prof = bundle.manifold.backend.profile
    masks = [region_mask(p, (prof.height, prof.width), layout).mask for p in params_list]
    return torch.tensor(np.stack(masks), dtype=torch.float64)


def _objective_batch(bundle, frame_px: torch.Tensor, params_vec: torch.Tensor,
                     masks: torch.Tensor, weights: LossWeights, sigma: float,
                     generator: torch.Generator | None, estimator, perceptual, identity):
    """Weighted objective over a batch; returns (total, per-term weighted means)."""
    pitch, yaw = params_vec[..., PITCH_IDX], params_vec[..., YAW_IDX]
    jaw, expr = params_vec[..., JAW_SLICE], params_vec[..., EXPR_SLICE]
    neck = params_vec[..., NECK_SLICE]

    _, w_rot = bundle.pose.forward_tensor(pitch, yaw)
    residual = bundle.expr.forward_tensor(jaw, expr)
    img_r = bundle.manifold.backend.synthesize_tensor(compose_tensor(w_rot, residual))

    jaw_p = jaw + sigma * torch.randn(jaw.shape, dtype=torch.float64, generator=generator)
    expr_p = expr + sigma * torch.randn(expr.shape, dtype=torch.float64, generator=generator)
    residual_p = bundle.expr.forward_tensor(jaw_p, expr_p)
    img_e = bundle.manifold.backend.synthesize_tensor(compose_tensor(w_rot, residual_p))

    est = estimator.estimate_tensor(img_e)
    terms = {
        "lpips": perceptual.distance_tensor(img_r, frame_px).mean(),
        "l2": (img_r - frame_px).pow(2).mean(dim=(-3, -2, -1)).mean(),
        "id": identity.distance_tensor(img_r, frame_px).mean(),
        "cons": (masks[..., None] * (img_e - img_r)).pow(2).mean(dim=(-3, -2, -1)).mean(),
        "pose": (est[..., NECK_SLICE] - neck).pow(2).sum(dim=-1).mean(),
        "expr": torch.cat([
            est[..., JAW_SLICE] - jaw_p, est[..., EXPR_SLICE] - expr_p,
        ], dim=-1).pow(2).sum(dim=-1).mean(),
        "local": residual.pow(2).sum(dim=(-2, -1)).mean(),
    }
    weighted = {name: getattr(weights, name) * terms[name] for name in TERM_NAMES}
    total = sum(weighted.values())
    return total, weighted


def total_objective(bundle: MapperBundle, frame: Image, params: FaceParams,
                    weights: LossWeights = LossWeights(),
                    pcfg: PerturbationConfig = PerturbationConfig(),
                    estimator=None, perceptual=None, identity=None):
    """Full training objective for one frame; returns (loss tensor, term breakdown).

    The loss tensor carries gradients w.r.t. the mapper weights; the breakdown
    holds the weighted per-term values, which sum to the total.
    """
    estimator = estimator or ToyEstimator(bundle.manifold.backend.spec.param_band_rows)
    perceptual = perceptual or PyramidPerceptual()
    identity = identity or SketchIdentity(bundle.manifold.backend.spec.param_band_rows)
    masks = _frame_masks(bundle, [params])
    gen = torch.Generator().manual_seed(pcfg.seed)
    total, weighted = _objective_batch(
        bundle,
        torch.tensor(frame.pixels, dtype=torch.float64)[None],
        torch.tensor(params.to_vector(), dtype=torch.float64)[None],
        masks, weights, pcfg.sigma, gen, estimator, perceptual, identity,
    )
    return total, {name: float(v.detach()) for name, v in weighted.items()}


@dataclass
class TrainResult:
    bundle: MapperBundle
    history: np.ndarray  # (steps, 8): total + seven weighted terms
    checkpoints: list = field(default_factory=list)


def train(bundle: MapperBundle, frames, video_params, cfg: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights(), pcfg: PerturbationConfig = PerturbationConfig(),
          checkpoint_dir=None, progress=None, should_cancel=None) -> TrainResult:
    """Stochastic training of both mappers over the video; generator stays frozen."""
    backend = bundle.manifold.backend
    backend.theta.requires_grad_(False)

    if isinstance(frames, np.ndarray):
        frame_px = torch.tensor(frames, dtype=torch.float64)
    else:
        frame_px = torch.tensor(np.stack([im.pixels for im in frames]), dtype=torch.float64)
    params_vec = torch.tensor(np.stack([p.to_vector() for p in video_params]), dtype=torch.float64)
    n = frame_px.shape[0]
    if params_vec.shape[0] != n:
        raise ValueError("frame and parameter counts differ")

    estimator = ToyEstimator(backend.spec.param_band_rows)
    perceptual = PyramidPerceptual()
    identity = SketchIdentity(backend.spec.param_band_rows)
    masks = _frame_masks(bundle, video_params)

    history = np.zeros((cfg.steps, 1 + len(TERM_NAMES)))
    checkpoints = []
    if cfg.steps == 0:
        return TrainResult(bundle, history, checkpoints)

    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(bundle.trainable_parameters(), lr=cfg.learning_rate,
                           betas=(cfg.beta1, cfg.beta2))
    last_checkpoint = None
    for step in range(cfg.steps):
        if should_cancel is not None and should_cancel():
            history = history[:step]
            break
        batch = torch.randint(n, (min(cfg.batch_size, n),), generator=gen)
        total, weighted = _objective_batch(
            bundle, frame_px[batch], params_vec[batch], masks[batch],
            weights, pcfg.sigma, gen, estimator, perceptual, identity,
        )
        if not torch.isfinite(total):
            raise TrainingDiverged(f"loss diverged at step {step}", last_checkpoint)
        opt.zero_grad()
        total.backward()
        opt.step()
        history[step, 0] = float(total.detach())
        for j, name in enumerate(TERM_NAMES):
            history[step, 1 + j] = float(weighted[name].detach())
        if cfg.checkpoint_every and checkpoint_dir and (step + 1) % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"step_{step + 1:06d}"
            save_bundle(path, bundle)
            checkpoints.append(path)
            last_checkpoint = path
        if progress is not None:
            progress(step=step + 1, loss=float(total.detach()))

    bundle.provenance = dict(bundle.provenance)
    bundle.provenance.update({
        "train_steps": int(history.shape[0]), "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size, "seed": cfg.seed, "sigma": pcfg.sigma,
        "loss_weights": weights.as_dict(),
    })
    return TrainResult(bundle, history, checkpoints)


def write_history(path, history: np.ndarray) -> None:
    """Line-delimited loss stream: step, total, then the seven term values."""
    with open(path, "w") as f:
        f.write("# step total " + " ".join(TERM_NAMES) + "\n")
        for step, row in enumerate(history):
            vals = " ".join(str(np.float32(v)) for v in row)
            f.write(f"{step} {vals}\n")


def dump_debug_grid(path, frame: Image, rendered: Image, perturbed: Image, mask: RegionMask) -> None:
    """2x2 PNG of (frame, render, perturbed render, mask) for eyeballing a step."""
    from PIL import Image as PILImage

    mask_rgb = np.repeat(mask.mask[:, :, None], 3, axis=2)
    top = np.concatenate([frame.pixels, rendered.pixels], axis=1)
    bottom = np.concatenate([perturbed.pixels, mask_rgb], axis=1)
    grid = (np.clip(np.concatenate([top, bottom], axis=0), 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(grid).save(path)
