"""Generator/inverter capability interfaces and the deterministic toy backend.

The toy backend is a small differentiable renderer: a latent code decodes
linearly into face parameters, which drive (a) a one-row "parameter band"
whose pixel intensities encode the parameters through a fixed affine map,
and (b) a procedural face sketch drawn with smooth (sigmoid) masks so every
pixel is differentiable with respect to both the latent and the generator
parameters. The band makes the toy estimator exact, which is what lets the
training losses be gradient-checked against finite differences.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .faceparams import (
    EXPR_SLICE,
    JAW_SLICE,
    NECK_SLICE,
    PARAM_DIM,
    PITCH_IDX,
    YAW_IDX,
    FaceParams,
    Image,
)

PVPW_MAGIC = b"PVPW"
PVPW_VERSION = 1
PVPG_MAGIC = b"PVPG"
PVPG_VERSION = 1

# Affine band map: intensity = 0.5 + value / scale, clamped to [0, 1].
# Scales are powers of two so the encode/decode round trip is exact to
# float rounding. Estimates are exact only while parameters stay inside
# the half-scale envelope (|yaw| <= 128 deg, |pitch| <= 64 deg, neck
# <= 1 rad, jaw <= 16 rad, expression <= 16); outside it the band saturates.
BAND_SCALE = np.concatenate([
    [256.0, 128.0],      # yaw, pitch (degrees)
    [2.0, 2.0, 2.0],     # neck pose (radians)
    [32.0, 32.0, 32.0],  # jaw pose (radians)
    np.full(50, 32.0),   # expression
])

_BACKGROUND = (0.92, 0.92, 0.92)
_FEATURE_COLOR = (0.12, 0.12, 0.12)
_MOUTH_COLOR = (0.45, 0.12, 0.14)


@dataclass(frozen=True)
class BackendProfile:
    """Shape contract shared by latents, images and checkpoints."""

    layers: int
    dim: int
    height: int
    width: int
    geometry_layers: int


@dataclass(frozen=True)
class LatentCode:
    """A layered style code: one dim-vector per synthesis layer."""

    layers: np.ndarray  # (L, D)

    def __post_init__(self):
        arr = np.asarray(self.layers, dtype=np.float64)
        object.__setattr__(self, "layers", arr)
        if arr.ndim != 2:
            raise ValueError(f"latent must be LxD, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent entries must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.layers.shape


@dataclass(frozen=True)
class ToyGeneratorSpec:
    image_size: int = 64
    layers: int = 6
    dim: int = 32
    geometry_layers: int = 4
    param_band_rows: int = 1
    seed: int = 1234


class ToyFaceLayout:
    """Publishes the exact pixel regions driven by jaw/expression inputs.

    Box coordinates are derived from the same geometry formulas the renderer
    uses, padded to cover the full travel of each feature.
    """

    def __init__(self, spec: ToyGeneratorSpec):
        self.spec = spec

    def excluded_boxes(self, params: FaceParams, dims):
        h, w = dims
        g = _sketch_geometry(
            torch.tensor(params.to_vector(), dtype=torch.float64), width=w, height=h
        )
        cx, cy = float(g["cx"]), float(g["cy"])
        rx, ry = float(g["rx"]), float(g["ry"])
        ex_off = 0.45 * rx
        ey = cy - 0.30 * ry
        my = cy + 0.42 * ry
        boxes = []
        for ex in (cx - ex_off, cx + ex_off):
            boxes.append(("eyes", int(ey - 9), int(ey + 4) + 1, int(ex - 6), int(ex + 6) + 1))
        boxes.append(("mouth", int(my - 7), int(my + 7) + 1, int(cx - 9), int(cx + 9) + 1))
        # Band pixels encoding jaw/expression move with the perturbed inputs
        # just like mouth pixels do, so the consistency mask excludes them.
        boxes.append(("band_jaw_expr", 0, self.spec.param_band_rows, JAW_SLICE.start, EXPR_SLICE.stop))
        return boxes


def _sketch_geometry(p: torch.Tensor, width: int, height: int) -> dict:
    """Face geometry (head center/axes, feature anchors) from parameters.

    Every quantity is a smooth function of ``p`` so gradients are defined
    everywhere; bounded activations keep the face near the canvas for any
    finite input.
    """
    yaw = p[..., YAW_IDX]
    pitch = p[..., PITCH_IDX]
    yaw_rad = yaw * (torch.pi / 180.0)
    # linear in yaw/pitch so the pixel loss keeps a constant-strength pose
    # gradient out to the extreme poses; beyond the band envelope the face
    # simply leaves the canvas, which stays finite and in-range
    cx = 0.5 * width + 18.0 * (yaw / 90.0)
    cy = 0.53 * height - 10.0 * (pitch / 45.0)
    rx = 12.0 * (0.60 + 0.40 * torch.cos(torch.clamp(yaw_rad, -torch.pi, torch.pi)))
    ry = torch.full_like(cx, 18.0)
    return {"cx": cx, "cy": cy, "rx": rx, "ry": ry}


def _soft_ellipse(X, Y, cx, cy, rx, ry, tau):
    q = ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2
    return torch.sigmoid((1.0 - q) / tau)


def _soft_rect(X, Y, cx, cy, hw, hh, tau):
    mx = torch.sigmoid((X - (cx - hw)) / tau) * torch.sigmoid(((cx + hw) - X) / tau)
    my = torch.sigmoid((Y - (cy - hh)) / tau) * torch.sigmoid(((cy + hh) - Y) / tau)
    return mx * my


class ToyGenerator:
    """Deterministic differentiable stand-in for a pretrained layered generator.

    Parameters are a flat float64 vector packing the linear decode map
    (geometry layers -> face parameters) and the color map (remaining
    layers -> sketch fill color). Synthesis is deterministic given
    (latent, parameters).
    """

    differentiable = True

    def __init__(self, spec: ToyGeneratorSpec = ToyGeneratorSpec(), _theta: torch.Tensor | None = None):
        self.spec = spec
        L, D, G = spec.layers, spec.dim, spec.geometry_layers
        self._geo_in = G * D
        self._col_in = (L - G) * D
        self._sizes = [PARAM_DIM * self._geo_in, PARAM_DIM, 3 * self._col_in, 3]
        if _theta is not None:
            self._theta = _theta
        else:
            rng = np.random.default_rng(spec.seed)
            # jaw/expression rows get large gains so a unit coefficient change
            # costs only a small latent move; the latent-residual regularizer
            # would otherwise swamp the expression-matching objective
            row_std = np.concatenate([
                [35.0, 15.0], np.full(3, 0.12), np.full(3, 12.0), np.full(50, 12.0),
            ])
            w_geo = rng.standard_normal((PARAM_DIM, self._geo_in)) * (row_std[:, None] / np.sqrt(self._geo_in))
            w_col = rng.standard_normal((3, self._col_in)) * (0.8 / np.sqrt(self._col_in))
            theta = np.concatenate([w_geo.ravel(), np.zeros(PARAM_DIM), w_col.ravel(), np.zeros(3)])
            self._theta = torch.tensor(theta, dtype=torch.float64)
        self._band_scale = torch.tensor(BAND_SCALE, dtype=torch.float64)
        n = spec.image_size
        ys, xs = torch.meshgrid(
            torch.arange(n, dtype=torch.float64), torch.arange(n, dtype=torch.float64), indexing="ij"
        )
        self._Y, self._X = ys[spec.param_band_rows:], xs[spec.param_band_rows:]
        self.face_layout = ToyFaceLayout(spec)

    # -- profile / parameters -------------------------------------------------

    @property
    def profile(self) -> BackendProfile:
        s = self.spec
        return BackendProfile(s.layers, s.dim, s.image_size, s.image_size, s.geometry_layers)

    @property
    def theta(self) -> torch.Tensor:
        """Flat parameter tensor; optimizers may mark it requires_grad."""
        return self._theta

    def get_parameters(self) -> np.ndarray:
        return self._theta.detach().numpy().copy()

    def set_parameters(self, values) -> None:
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {vec.shape}")
        self._theta = torch.tensor(vec, dtype=torch.float64)

    @property
    def param_count(self) -> int:
        return sum(self._sizes)

    def clone(self) -> "ToyGenerator":
        return ToyGenerator(self.spec, _theta=self._theta.detach().clone())

    def _unpack(self, theta):
        s0, s1, s2, s3 = self._sizes
        w_geo = theta[:s0].reshape(PARAM_DIM, self._geo_in)
        b_geo = theta[s0 : s0 + s1]
        w_col = theta[s0 + s1 : s0 + s1 + s2].reshape(3, self._col_in)
        b_col = theta[s0 + s1 + s2 :]
        return w_geo, b_geo, w_col, b_col

    @property
    def decode_matrix(self) -> np.ndarray:
        """Jacobian of decoded parameters w.r.t. the flattened latent.

        Columns for the non-geometry layers are zero: the band never reads them.
        """
        w_geo, _, _, _ = self._unpack(self._theta.detach())
        L, D = self.spec.layers, self.spec.dim
        full = np.zeros((PARAM_DIM, L * D))
        full[:, : self._geo_in] = w_geo.numpy()
        return full

    # -- synthesis -------------------------------------------------------------

    def decode_tensor(self, w: torch.Tensor) -> torch.Tensor:
        """Linear decode of the geometry layers into the 58 face parameters."""
        w_geo, b_geo, _, _ = self._unpack(self._theta)
        g = w[..., : self.spec.geometry_layers, :].reshape(*w.shape[:-2], self._geo_in)
        return g @ w_geo.mT + b_geo

    def color_tensor(self, w: torch.Tensor) -> torch.Tensor:
        _, _, w_col, b_col = self._unpack(self._theta)
        c = w[..., self.spec.geometry_layers :, :].reshape(*w.shape[:-2], self._col_in)
        return 0.5 + 0.35 * torch.tanh(c @ w_col.mT + b_col)

    def render_params_tensor(self, p: torch.Tensor, color: torch.Tensor) -> torch.Tensor:
        """Render images (..., H, W, 3) from parameter vectors and a fill color."""
        spec = self.spec
        n = spec.image_size
        batch = p.shape[:-1]
        X = self._X.expand(*batch, *self._X.shape)
        Y = self._Y.expand(*batch, *self._Y.shape)

        def bc(t):  # broadcast a per-item scalar over the pixel grid
            return t.reshape(*batch, 1, 1)

        g = _sketch_geometry(p, width=n, height=n)
        cx, cy, rx, ry = bc(g["cx"]), bc(g["cy"]), bc(g["rx"]), bc(g["ry"])
        ex_off, ey = 0.45 * rx, cy - 0.30 * ry

        head = _soft_ellipse(X, Y, cx, cy, rx, ry, tau=0.08)
        eyes = _soft_ellipse(X, Y, cx - ex_off, ey, 2.3, 1.6, tau=0.15) + _soft_ellipse(
            X, Y, cx + ex_off, ey, 2.3, 1.6, tau=0.15
        )
        eyes = torch.clamp(eyes, max=1.0)

        brow_l = ey - 4.2 - bc(2.5 * torch.tanh(p[..., EXPR_SLICE.start] / 2.0))
        brow_r = ey - 4.2 - bc(2.5 * torch.tanh(p[..., EXPR_SLICE.start + 1] / 2.0))
        brows = _soft_rect(X, Y, cx - ex_off, brow_l, 3.0, 0.9, tau=0.5) + _soft_rect(
            X, Y, cx + ex_off, brow_r, 3.0, 0.9, tau=0.5
        )
        brows = torch.clamp(brows, max=1.0)

        my = cy + 0.42 * ry
        aperture = bc(2.0 + 1.8 * torch.tanh(1.5 * p[..., JAW_SLICE.start]))
        mouth = _soft_ellipse(X, Y, cx, my, 5.5, aperture, tau=0.15)

        bg = torch.tensor(_BACKGROUND, dtype=torch.float64)
        feat = torch.tensor(_FEATURE_COLOR, dtype=torch.float64)
        mouth_c = torch.tensor(_MOUTH_COLOR, dtype=torch.float64)
        img = bg.expand(*batch, n - spec.param_band_rows, n, 3)
        img = img + head[..., None] * (color[..., None, None, :] - img)
        img = img + eyes[..., None] * (feat - img)
        img = img + brows[..., None] * (feat - img)
        img = img + mouth[..., None] * (mouth_c - img)

        band_vals = torch.clamp(0.5 + p / self._band_scale, 0.0, 1.0)
        band_row = torch.zeros(*batch, spec.param_band_rows, n, 3, dtype=torch.float64)
        band_row = band_row + torch.cat(
            [band_vals, torch.zeros(*batch, n - PARAM_DIM, dtype=torch.float64)], dim=-1
        )[..., None, :, None]
        return torch.cat([band_row, img], dim=-3)

    def synthesize_tensor(self, w: torch.Tensor) -> torch.Tensor:
        """Differentiable synthesis; accepts (L, D) or batched (..., L, D)."""
        L, D = self.spec.layers, self.spec.dim
        if w.shape[-2:] != (L, D):
            raise ValueError(f"latent shape mismatch: expected (..., {L}, {D}), got {tuple(w.shape)}")
        return self.render_params_tensor(self.decode_tensor(w), self.color_tensor(w))

    def synthesize(self, w: LatentCode) -> Image:
        L, D = self.spec.layers, self.spec.dim
        if w.shape != (L, D):
            raise ValueError(f"latent shape mismatch: expected ({L}, {D}), got {w.shape}")
        with torch.no_grad():
            px = self.synthesize_tensor(torch.tensor(w.layers, dtype=torch.float64))
        return Image(pixels=px.numpy())

    def synthesize_from_params(self, params: FaceParams, color=(0.5, 0.5, 0.5)) -> Image:
        """Render directly from face parameters (toy video generation)."""
        with torch.no_grad():
            px = self.render_params_tensor(
                torch.tensor(params.to_vector(), dtype=torch.float64),
                torch.tensor(color, dtype=torch.float64),
            )
        return Image(pixels=px.numpy())

    def sample_prior(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Native prior over latents: standard normal per entry."""
        L, D = self.spec.layers, self.spec.dim
        return torch.randn(n, L, D, dtype=torch.float64, generator=generator)


def clone_backend(backend: ToyGenerator) -> ToyGenerator:
    """Independent copy whose parameters can be tuned without touching the original."""
    return backend.clone()


class ToyEstimator:
    """Reads the parameter band and inverts its affine intensity map exactly."""

    differentiable = True

    def __init__(self, band_rows: int = 1):
        self.band_rows = band_rows
        self._scale = torch.tensor(BAND_SCALE, dtype=torch.float64)

    def estimate_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        if pixels.shape[-1] != 3 or pixels.shape[-2] < PARAM_DIM:
            raise ValueError(f"unexpected image shape {tuple(pixels.shape)}")
        band = pixels[..., 0, :PARAM_DIM, :].mean(dim=-1)
        return (band - 0.5) * self._scale

    def estimate(self, image: Image) -> FaceParams:
        with torch.no_grad():
            vec = self.estimate_tensor(torch.tensor(image.pixels, dtype=torch.float64))
        return FaceParams.from_vector(vec.numpy())


class ToyInverter:
    """Least-squares preimage of the decoded parameters, then pixel refinement."""

    def __init__(self, backend: ToyGenerator, refine_steps: int = 200, lr: float = 0.08,
                 tol_rmse: float = 2.5e-4, warn_rmse: float = 1e-2):
        self.backend = backend
        self.refine_steps = refine_steps
        self.lr = lr
        self.tol_rmse = tol_rmse
        self.warn_rmse = warn_rmse
        self.estimator = ToyEstimator(backend.spec.param_band_rows)

    def invert(self, image: Image) -> LatentCode:
        return self.invert_batch([image])[0]

    def invert_batch(self, images) -> list[LatentCode]:
        """Invert several images jointly (one optimizer, batched renders).

        The geometry layers come from an exact least-squares solve against the
        decoded parameters and stay fixed; pixel refinement only fits the
        color layers, which the parameter band cannot determine.
        """
        b = self.backend
        for image in images:
            if image.pixels.shape[:2] != (b.spec.image_size, b.spec.image_size):
                raise ValueError("image dims do not match backend profile")
        target = torch.tensor(np.stack([im.pixels for im in images]), dtype=torch.float64)
        p = self.estimator.estimate_tensor(target).numpy()
        w_geo, b_geo, _, _ = b._unpack(b.theta.detach())
        g, *_ = np.linalg.lstsq(w_geo.numpy(), (p - b_geo.numpy()).T, rcond=None)
        L, D, G = b.spec.layers, b.spec.dim, b.spec.geometry_layers
        n = len(images)
        geo = torch.tensor(g.T.reshape(n, G, D), dtype=torch.float64)

        color = torch.zeros(n, L - G, D, dtype=torch.float64, requires_grad=True)
        best = torch.zeros(n, L - G, D, dtype=torch.float64)
        best_mse = torch.full((n,), np.inf, dtype=torch.float64)

        def item_mse(cur_color):
            w = torch.cat([geo, cur_color], dim=1)
            diff = b.synthesize_tensor(w) - target
            return diff.pow(2).mean(dim=(-3, -2, -1))

        opt = torch.optim.Adam([color], lr=self.lr)
        for _ in range(self.refine_steps + 1):
            mse = item_mse(color)
            with torch.no_grad():
                improved = mse < best_mse
                best[improved] = color.detach()[improved]
                best_mse = torch.minimum(best_mse, mse.detach())
            if best_mse.max().item() < self.tol_rmse**2:
                break
            opt.zero_grad()
            mse.sum().backward()
            opt.step()
        worst = best_mse.max().item()
        best = torch.cat([geo, best], dim=1)
        if worst > self.warn_rmse**2:
            warnings.warn(
                f"inversion did not converge: worst pixel RMSE {np.sqrt(worst):.4g}",
                InversionWarning,
            )
        return [LatentCode(layers=row.numpy()) for row in best]


class InversionWarning(UserWarning):
    pass


# -- toy video ---------------------------------------------------------------

def make_toy_video(backend: ToyGenerator, n_frames: int, seed: int = 0):
    """Synthesize a smooth portrait-like parameter sweep and its rendered frames.

    Returns (frames, params): frames is (N, H, W, 3) float64, params a list of
    FaceParams. Pose/expression follow multi-frequency sinusoids so clustering
    has real structure; the sketch color drifts slowly to mimic lighting change.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames, dtype=np.float64)
    vecs = np.zeros((n_frames, PARAM_DIM))
    vecs[:, YAW_IDX] = 70.0 * np.sin(2 * np.pi * t / 293.0) + 6.0 * np.sin(2 * np.pi * t / 47.0 + 1.1)
    vecs[:, PITCH_IDX] = 24.0 * np.sin(2 * np.pi * t / 181.0 + 0.6) + 4.0 * np.sin(2 * np.pi * t / 37.0)
    for j in range(3):
        vecs[:, NECK_SLICE.start + j] = 0.22 * np.sin(2 * np.pi * t / (157.0 + 30.0 * j) + j)
    vecs[:, JAW_SLICE.start] = 0.22 * np.sin(2 * np.pi * t / 83.0) + 0.06 * np.sin(2 * np.pi * t / 29.0 + 2.0)
    vecs[:, JAW_SLICE.start + 1] = 0.08 * np.sin(2 * np.pi * t / 111.0 + 0.3)
    vecs[:, JAW_SLICE.start + 2] = 0.08 * np.sin(2 * np.pi * t / 131.0 + 1.7)
    for j in range(50):
        if j < 8:
            amp = rng.uniform(0.05, 0.12)
        else:
            amp = 0.01
        period = rng.uniform(60.0, 240.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        vecs[:, EXPR_SLICE.start + j] = amp * np.sin(2 * np.pi * t / period + phase)

    colors = 0.5 + 0.08 * np.stack([
        np.sin(2 * np.pi * t / 380.0),
        np.sin(2 * np.pi * t / 530.0 + 1.0),
        np.sin(2 * np.pi * t / 460.0 + 2.0),
    ], axis=1)

    with torch.no_grad():
        frames = backend.render_params_tensor(
            torch.tensor(vecs, dtype=torch.float64), torch.tensor(colors, dtype=torch.float64)
        ).numpy()
    params = [FaceParams.from_vector(v) for v in vecs]
    return frames, params


# -- serialization -----------------------------------------------------------

def write_latent_record(f, latent: LatentCode) -> None:
    L, D = latent.shape
    f.write(PVPW_MAGIC)
    f.write(struct.pack("<HHH", PVPW_VERSION, L, D))
    f.write(latent.layers.astype("<f4").tobytes())


def read_latent_record(f) -> LatentCode | None:
    magic = f.read(4)
    if not magic:
        return None
    if magic != PVPW_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {PVPW_MAGIC!r}")
    version, L, D = struct.unpack("<HHH", f.read(6))
    if version != PVPW_VERSION:
        raise ValueError(f"unsupported PVPW version {version}")
    data = np.frombuffer(f.read(L * D * 4), dtype="<f4")
    if data.size != L * D:
        raise ValueError("truncated PVPW payload")
    return LatentCode(layers=data.reshape(L, D).astype(np.float64))


def save_latents(path, latents) -> None:
    with open(path, "wb") as f:
        for lat in latents:
            write_latent_record(f, lat)


def load_latents(path) -> list[LatentCode]:
    out = []
    with open(path, "rb") as f:
        while True:
            rec = read_latent_record(f)
            if rec is None:
                return out
            out.append(rec)


def save_checkpoint(path, backend: ToyGenerator) -> None:
    prof = backend.profile
    params = backend.get_parameters().astype("<f4")
    with open(path, "wb") as f:
        f.write(PVPG_MAGIC)
        f.write(struct.pack("<HHHHHHQ", PVPG_VERSION, prof.layers, prof.dim,
                            prof.height, prof.width, prof.geometry_layers, params.size))
        f.write(params.tobytes())


def load_checkpoint(path) -> tuple[BackendProfile, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PVPG_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {PVPG_MAGIC!r}")
        version, L, D, H, W, G, count = struct.unpack("<HHHHHHQ", f.read(20))
        if version != PVPG_VERSION:
            raise ValueError(f"unsupported PVPG version {version}")
        data = np.frombuffer(f.read(count * 4), dtype="<f4")
    if data.size != count:
        raise ValueError("truncated PVPG payload")
    return BackendProfile(L, D, H, W, G), data.astype(np.float64)


def toy_backend_from_checkpoint(path) -> ToyGenerator:
    profile, params = load_checkpoint(path)
    spec = ToyGeneratorSpec(
        image_size=profile.height, layers=profile.layers, dim=profile.dim,
        geometry_layers=profile.geometry_layers,
    )
    backend = ToyGenerator(spec)
    backend.set_parameters(params)
    return backend
