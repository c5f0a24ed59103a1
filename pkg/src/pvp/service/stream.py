"""Render-session machinery for the live control stream.

Protocol: the client sends JSON text (control states or playback commands).
For every frame the server first sends a JSON meta message
{type, seq, state|index, encoding} and then one binary message
{seq: u64, h: u32, w: u32, payload} with the encoded RGB frame.
Under backlog only the newest pending control state is rendered.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from ..animation import load_directions
from ..faceparams import FaceParams
from ..mappers import load_bundle
from ..personalization import load_manifold

FRAME_HEADER = struct.Struct("<QII")


class RenderSession:
    """Read-only view over a ready avatar's artifacts, driving one stream."""

    def __init__(self, avatar_dir: Path, lossy: bool = False):
        self.manifold = load_manifold(Path(avatar_dir) / "manifold")
        self.bundle = load_bundle(Path(avatar_dir) / "bundle", self.manifold)
        self.directions = {}
        directions_path = Path(avatar_dir) / "directions.pvpd"
        if directions_path.exists():
            for d in load_directions(directions_path, self.manifold.backend.profile):
                self.directions[d.name] = d
        self.lossy = lossy

    def render_state(self, yaw, pitch, jaw, expr, edits) -> np.ndarray:
        return self.render_state_with_weights(yaw, pitch, jaw, expr, edits)[0]

    def render_state_with_weights(self, yaw, pitch, jaw, expr, edits):
        """Render one control state; returns (pixels, blend weights).

        Edits are (name, strength) pairs applied to the composed latent.
        """
        with torch.no_grad():
            alpha, w_rot = self.bundle.pose.forward_tensor(
                torch.tensor([float(pitch)], dtype=torch.float64),
                torch.tensor([float(yaw)], dtype=torch.float64),
            )
            residual = self.bundle.expr.forward_tensor(
                torch.tensor(np.asarray(jaw, dtype=np.float64))[None],
                torch.tensor(np.asarray(expr, dtype=np.float64))[None],
            )
            w_final = w_rot + residual
            for name, strength in edits:
                if name not in self.directions:
                    raise KeyError(f"unknown edit direction {name!r}")
                offs = torch.tensor(self.directions[name].offsets, dtype=torch.float64)
                w_final = w_final + float(strength) * offs
            px = self.manifold.backend.synthesize_tensor(w_final)[0]
        return px.numpy(), alpha[0].numpy()

    def render_params(self, params: FaceParams) -> np.ndarray:
        return self.render_state(params.yaw_deg, params.pitch_deg, params.jaw_pose,
                                 params.expression, [])

    def encode_frame(self, seq: int, pixels: np.ndarray) -> bytes:
        rgb8 = (np.clip(pixels, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        h, w = rgb8.shape[:2]
        if self.lossy:
            import io

            from PIL import Image as PILImage

            buf = io.BytesIO()
            PILImage.fromarray(rgb8).save(buf, format="JPEG", quality=85)
            payload = buf.getvalue()
        else:
            payload = zlib.compress(rgb8.tobytes(), 6)
        return FRAME_HEADER.pack(seq, h, w) + payload

    @property
    def encoding(self) -> str:
        return "jpeg" if self.lossy else "zlib-rgb8"


def decode_frame(message: bytes):
    """Inverse of encode_frame for the lossless encoding (tests, CLI client)."""
    seq, h, w = FRAME_HEADER.unpack(message[: FRAME_HEADER.size])
    raw = zlib.decompress(message[FRAME_HEADER.size :])
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return seq, pixels
