"""Pose and expression mappers: small MLPs driving a pivot-blended latent code.

The pose mapper turns (pitch, yaw) into blending weights over the pivot
latents, constrained to the beta-dilated simplex (weights sum to 1, each
>= -beta). The expression mapper turns (jaw, expression) into a latent
residual confined to the geometry layers. Their sum is what the tuned
generator renders.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .faceparams import FaceParams
from .genbackend import LatentCode

WEIGHT_SUM_TOL = 1e-6
WEIGHT_FLOOR_TOL = 1e-9


@dataclass(frozen=True)
class BlendWeights:
    """Coordinates of a manifold point over the pivots."""

    alpha: np.ndarray
    beta: float

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", a)
        if a.ndim != 1:
            raise ValueError("alpha must be a vector")
        if abs(a.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"blend weights must sum to 1, got {a.sum()!r}")
        if a.min() < -self.beta - WEIGHT_FLOOR_TOL:
            raise ValueError(f"blend weight {a.min()!r} below -beta = {-self.beta!r}")


def project_raw_to_weights_tensor(raw: torch.Tensor, beta: float) -> torch.Tensor:
    """Map unconstrained network outputs onto the beta-dilated simplex.

    Centroid residual first (raw of zero lands on uniform weights), then the
    softplus shift bounds every weight above -beta, and an affine rescale of
    the shifted-positive coordinates restores the unit sum without breaking
    the bound.
    """
    k = raw.shape[-1]
    v = raw + 1.0 / k
    shifted = F.softplus(v + beta)  # equals (weight + beta), guaranteed > 0
    total = shifted.sum(dim=-1, keepdim=True)
    if (total < 1e-12).any():
        raise ValueError("degenerate weight mass")
    return -beta + shifted * (1.0 + k * beta) / total


def project_raw_to_weights(raw, beta: float) -> BlendWeights:
    alpha = project_raw_to_weights_tensor(torch.as_tensor(raw, dtype=torch.float64), beta)
    return BlendWeights(alpha=alpha.numpy(), beta=beta)


def project_raw_to_weights_np(raw: np.ndarray, beta: float) -> np.ndarray:
    """Vectorized numpy twin of the projection, for bulk property checks."""
    raw = np.asarray(raw, dtype=np.float64)
    k = raw.shape[-1]
    shifted = np.logaddexp(0.0, raw + 1.0 / k + beta)
    total = shifted.sum(axis=-1, keepdims=True)
    if (total < 1e-12).any():
        raise ValueError("degenerate weight mass")
    return -beta + shifted * (1.0 + k * beta) / total


class _Mlp2(torch.nn.Module):
    """2-layer MLP: linear -> leaky ReLU -> linear -> tanh, zero-init output."""

    def __init__(self, n_in, n_hidden, n_out, slope, generator):
        super().__init__()
        self.fc1 = torch.nn.Linear(n_in, n_hidden, dtype=torch.float64)
        self.fc2 = torch.nn.Linear(n_hidden, n_out, dtype=torch.float64)
        self.slope = slope
        bound = 1.0 / np.sqrt(n_in)
        with torch.no_grad():
            self.fc1.weight.uniform_(-bound, bound, generator=generator)
            self.fc1.bias.uniform_(-bound, bound, generator=generator)
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()

    def forward(self, x):
        return torch.tanh(self.fc2(F.leaky_relu(self.fc1(x), negative_slope=self.slope)))


def _normalize(x, mean, scale):
    return (x - mean) / scale


def fit_norm_stats(samples: np.ndarray, noise_floor: float = 0.0):
    """Per-dimension (mean, std, scale) with a range/2 fallback for tiny stds.

    noise_floor widens the scale to cover training-time input perturbations:
    video coefficients can have far less spread than the perturbation noise,
    and normalizing by the raw std alone then saturates the mapper's tanh.
    """
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    half_range = (samples.max(axis=0) - samples.min(axis=0)) / 2.0
    scale = np.where(std >= 1e-6, std, np.where(half_range > 0, half_range, 1.0))
    scale = np.sqrt(scale**2 + noise_floor**2)
    return mean, std, scale


class PoseMapper:
    """Maps (pitch, yaw) in degrees to blending weights over the pivots."""

    def __init__(self, manifold, hidden: int = 128, raw_scale: float = 8.0,
                 leaky_slope: float = 0.2, seed: int = 0,
                 input_mean=None, input_scale=None):
        self.manifold = manifold
        self.k = len(manifold.pivots.latents)
        self.hidden = hidden
        self.raw_scale = raw_scale
        self.leaky_slope = leaky_slope
        gen = torch.Generator().manual_seed(seed)
        self.net = _Mlp2(2, hidden, self.k, leaky_slope, gen)
        self.input_mean = torch.tensor(
            np.zeros(2) if input_mean is None else np.asarray(input_mean, dtype=np.float64))
        self.input_scale = torch.tensor(
            np.ones(2) if input_scale is None else np.asarray(input_scale, dtype=np.float64))
        self._pivots = torch.tensor(
            np.stack([lat.layers for lat in manifold.pivots.latents]), dtype=torch.float64)

    def forward_tensor(self, pitch_deg: torch.Tensor, yaw_deg: torch.Tensor):
        """Returns (alpha, w_rot) with leading broadcast dims preserved."""
        x = torch.stack([pitch_deg, yaw_deg], dim=-1)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite pose input")
        raw = self.net(_normalize(x, self.input_mean, self.input_scale)) * self.raw_scale
        alpha = project_raw_to_weights_tensor(raw, self.manifold.beta)
        w_rot = torch.einsum("...k,kld->...ld", alpha, self._pivots)
        return alpha, w_rot

    def parameters(self):
        return list(self.net.parameters())


def pose_forward(pose: PoseMapper, pitch_deg: float, yaw_deg: float):
    """Public single-sample path: (pitch, yaw) -> (BlendWeights, w_rot)."""
    with torch.no_grad():
        alpha, w_rot = pose.forward_tensor(
            torch.tensor(float(pitch_deg), dtype=torch.float64),
            torch.tensor(float(yaw_deg), dtype=torch.float64),
        )
    return BlendWeights(alpha=alpha.numpy(), beta=pose.manifold.beta), LatentCode(layers=w_rot.numpy())


class ExpressionMapper:
    """Maps (jaw, expression) to a latent residual on the geometry layers only."""

    def __init__(self, profile, hidden: int = 128, out_scale: float = 1.0,
                 leaky_slope: float = 0.2, seed: int = 1,
                 input_mean=None, input_scale=None):
        self.profile = profile
        self.hidden = hidden
        self.out_scale = out_scale
        self.leaky_slope = leaky_slope
        gen = torch.Generator().manual_seed(seed)
        self.nets = torch.nn.ModuleList([
            _Mlp2(53, hidden, profile.dim, leaky_slope, gen)
            for _ in range(profile.geometry_layers)
        ])
        self.input_mean = torch.tensor(
            np.zeros(53) if input_mean is None else np.asarray(input_mean, dtype=np.float64))
        self.input_scale = torch.tensor(
            np.ones(53) if input_scale is None else np.asarray(input_scale, dtype=np.float64))

    def forward_tensor(self, jaw: torch.Tensor, expression: torch.Tensor) -> torch.Tensor:
        x = torch.cat([jaw, expression], dim=-1)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite expression input")
        x = _normalize(x, self.input_mean, self.input_scale)
        geo = torch.stack([net(x) for net in self.nets], dim=-2) * self.out_scale
        zeros = torch.zeros(
            *geo.shape[:-2], self.profile.layers - self.profile.geometry_layers,
            self.profile.dim, dtype=torch.float64,
        )
        return torch.cat([geo, zeros], dim=-2)

    def parameters(self):
        return [p for net in self.nets for p in net.parameters()]


def expr_forward(expr: ExpressionMapper, jaw_pose, expression) -> np.ndarray:
    """Public single-sample path: latent residual as an (L, D) array."""
    with torch.no_grad():
        res = expr.forward_tensor(
            torch.tensor(np.asarray(jaw_pose, dtype=np.float64)),
            torch.tensor(np.asarray(expression, dtype=np.float64)),
        )
    return res.numpy()


def compose_tensor(w_rot: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    if w_rot.shape != residual.shape:
        raise ValueError(f"shape mismatch: {tuple(w_rot.shape)} vs {tuple(residual.shape)}")
    return w_rot + residual


def compose(w_rot: LatentCode, residual) -> LatentCode:
    """Final latent = pose blend + expression residual (elementwise sum)."""
    residual = np.asarray(residual, dtype=np.float64)
    if w_rot.layers.shape != residual.shape:
        raise ValueError(f"shape mismatch: {w_rot.layers.shape} vs {residual.shape}")
    return LatentCode(layers=w_rot.layers + residual)


@dataclass
class MapperBundle:
    """The persisted avatar: both trained mappers plus training-video statistics."""

    pose: PoseMapper
    expr: ExpressionMapper
    manifold: object
    pose_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    pose_std: np.ndarray = field(default_factory=lambda: np.ones(2))
    jawexpr_mean: np.ndarray = field(default_factory=lambda: np.zeros(53))
    jawexpr_std: np.ndarray = field(default_factory=lambda: np.ones(53))
    provenance: dict = field(default_factory=dict)

    def render_tensor(self, pitch_deg, yaw_deg, jaw, expression) -> torch.Tensor:
        """Differentiable render path; neck pose is deliberately not an input."""
        _, w_rot = self.pose.forward_tensor(pitch_deg, yaw_deg)
        residual = self.expr.forward_tensor(jaw, expression)
        return self.manifold.backend.synthesize_tensor(compose_tensor(w_rot, residual))

    def final_latent_tensor(self, pitch_deg, yaw_deg, jaw, expression) -> torch.Tensor:
        _, w_rot = self.pose.forward_tensor(pitch_deg, yaw_deg)
        return compose_tensor(w_rot, self.expr.forward_tensor(jaw, expression))

    def render(self, params: FaceParams):
        from .faceparams import Image

        # batch of one: keeps this path bit-identical with training renders
        with torch.no_grad():
            px = self.render_tensor(
                torch.tensor([params.pitch_deg], dtype=torch.float64),
                torch.tensor([params.yaw_deg], dtype=torch.float64),
                torch.tensor(params.jaw_pose, dtype=torch.float64)[None],
                torch.tensor(params.expression, dtype=torch.float64)[None],
            )
        return Image(pixels=px[0].numpy())

    def trainable_parameters(self):
        return self.pose.parameters() + self.expr.parameters()


def render(bundle: MapperBundle, params: FaceParams):
    return bundle.render(params)


def make_bundle(manifold, video_params, pose_seed: int = 0, expr_seed: int = 1,
                hidden: int = 128, raw_scale: float = 8.0, out_scale: float = 0.1,
                expr_noise_floor: float = 0.5) -> MapperBundle:
    """Fresh zero-initialized bundle with normalization fit to the training video.

    expr_noise_floor should match the training perturbation sigma so the
    expression mapper sees O(1) inputs under perturbed coefficients.
    """
    pose_samples = np.stack([[p.pitch_deg, p.yaw_deg] for p in video_params])
    je_samples = np.stack([np.concatenate([p.jaw_pose, p.expression]) for p in video_params])
    p_mean, p_std, p_scale = fit_norm_stats(pose_samples)
    j_mean, j_std, j_scale = fit_norm_stats(je_samples, noise_floor=expr_noise_floor)
    pose = PoseMapper(manifold, hidden=hidden, raw_scale=raw_scale, seed=pose_seed,
                      input_mean=p_mean, input_scale=p_scale)
    expr = ExpressionMapper(manifold.backend.profile, hidden=hidden, out_scale=out_scale,
                            seed=expr_seed, input_mean=j_mean, input_scale=j_scale)
    return MapperBundle(pose=pose, expr=expr, manifold=manifold,
                        pose_mean=p_mean, pose_std=p_std,
                        jawexpr_mean=j_mean, jawexpr_std=j_std)


# -- persistence ---------------------------------------------------------------

def _write_tensor(f, name: str, tensor: torch.Tensor) -> None:
    data = tensor.detach().numpy().astype("<f4")
    name_b = name.encode()
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<B", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes())


def _read_tensors(f) -> dict:
    out = {}
    while True:
        head = f.read(2)
        if not head:
            return out
        (name_len,) = struct.unpack("<H", head)
        name = f.read(name_len).decode()
        (ndim,) = struct.unpack("<B", f.read(1))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(f.read(count * 4), dtype="<f4")
        if data.size != count:
            raise ValueError("truncated weight blob")
        out[name] = data.reshape(shape).astype(np.float64)


def save_bundle(bundle_dir, bundle: MapperBundle, manifold_path: str = "../manifold") -> None:
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "pvp-mapper-bundle",
        "version": 1,
        "architecture": {
            "k": bundle.pose.k,
            "hidden": bundle.pose.hidden,
            "raw_scale": bundle.pose.raw_scale,
            "out_scale": bundle.expr.out_scale,
            "leaky_slope": bundle.pose.leaky_slope,
            "layers": bundle.expr.profile.layers,
            "dim": bundle.expr.profile.dim,
            "geometry_layers": bundle.expr.profile.geometry_layers,
        },
        "normalization": {
            "pose_mean": bundle.pose.input_mean.numpy().tolist(),
            "pose_scale": bundle.pose.input_scale.numpy().tolist(),
            "jawexpr_mean": bundle.expr.input_mean.numpy().tolist(),
            "jawexpr_scale": bundle.expr.input_scale.numpy().tolist(),
        },
        "source_stats": {
            "pose_mean": bundle.pose_mean.tolist(),
            "pose_std": bundle.pose_std.tolist(),
            "jawexpr_mean": bundle.jawexpr_mean.tolist(),
            "jawexpr_std": bundle.jawexpr_std.tolist(),
        },
        "manifold_path": manifold_path,
        "provenance": bundle.provenance,
    }
    (bundle_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    with open(bundle_dir / "weights.bin", "wb") as f:
        _write_tensor(f, "pose.fc1.weight", bundle.pose.net.fc1.weight)
        _write_tensor(f, "pose.fc1.bias", bundle.pose.net.fc1.bias)
        _write_tensor(f, "pose.fc2.weight", bundle.pose.net.fc2.weight)
        _write_tensor(f, "pose.fc2.bias", bundle.pose.net.fc2.bias)
        for i, net in enumerate(bundle.expr.nets):
            _write_tensor(f, f"expr.{i}.fc1.weight", net.fc1.weight)
            _write_tensor(f, f"expr.{i}.fc1.bias", net.fc1.bias)
            _write_tensor(f, f"expr.{i}.fc2.weight", net.fc2.weight)
            _write_tensor(f, f"expr.{i}.fc2.bias", net.fc2.bias)


def load_bundle(bundle_dir, manifold) -> MapperBundle:
    bundle_dir = Path(bundle_dir)
    manifest = json.loads((bundle_dir / "manifest.json").read_text())
    if manifest.get("format") != "pvp-mapper-bundle":
        raise ValueError("not a mapper bundle directory")
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported bundle version {manifest.get('version')}")
    arch = manifest["architecture"]
    norm = manifest["normalization"]
    stats = manifest["source_stats"]
    if arch["k"] != len(manifold.pivots.latents):
        raise ValueError("bundle pivot count does not match manifold")
    pose = PoseMapper(manifold, hidden=arch["hidden"], raw_scale=arch["raw_scale"],
                      leaky_slope=arch["leaky_slope"],
                      input_mean=norm["pose_mean"], input_scale=norm["pose_scale"])
    expr = ExpressionMapper(manifold.backend.profile, hidden=arch["hidden"],
                            out_scale=arch["out_scale"], leaky_slope=arch["leaky_slope"],
                            input_mean=norm["jawexpr_mean"], input_scale=norm["jawexpr_scale"])
    with open(bundle_dir / "weights.bin", "rb") as f:
        tensors = _read_tensors(f)
    with torch.no_grad():
        pose.net.fc1.weight.copy_(torch.tensor(tensors["pose.fc1.weight"]))
        pose.net.fc1.bias.copy_(torch.tensor(tensors["pose.fc1.bias"]))
        pose.net.fc2.weight.copy_(torch.tensor(tensors["pose.fc2.weight"]))
        pose.net.fc2.bias.copy_(torch.tensor(tensors["pose.fc2.bias"]))
        for i, net in enumerate(expr.nets):
            net.fc1.weight.copy_(torch.tensor(tensors[f"expr.{i}.fc1.weight"]))
            net.fc1.bias.copy_(torch.tensor(tensors[f"expr.{i}.fc1.bias"]))
            net.fc2.weight.copy_(torch.tensor(tensors[f"expr.{i}.fc2.weight"]))
            net.fc2.bias.copy_(torch.tensor(tensors[f"expr.{i}.fc2.bias"]))
    return MapperBundle(
        pose=pose, expr=expr, manifold=manifold,
        pose_mean=np.array(stats["pose_mean"]), pose_std=np.array(stats["pose_std"]),
        jawexpr_mean=np.array(stats["jawexpr_mean"]), jawexpr_std=np.array(stats["jawexpr_std"]),
        provenance=manifest.get("provenance", {}),
    )
