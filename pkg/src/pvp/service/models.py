"""Request/response schemas for the avatar service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

AvatarState = Literal[
    "ingesting", "selecting_pivots", "personalizing", "training_mappers", "ready", "failed"
]

STATE_ORDER = ("ingesting", "selecting_pivots", "personalizing", "training_mappers", "ready")


class ToyVideoSpec(BaseModel):
    n_frames: int = Field(600, ge=2)
    seed: int = 0


class VideoPayload(BaseModel):
    """Base64 of an .npz with arrays 'frames' (N,H,W,3 in [0,1]) and 'params' (N,58)."""

    npz_b64: str


class CreateAvatarRequest(BaseModel):
    toy: Optional[ToyVideoSpec] = None
    video: Optional[VideoPayload] = None

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.toy is None) == (self.video is None):
            raise ValueError("provide exactly one of 'toy' or 'video'")
        return self


class SmoothingOverrides(BaseModel):
    enabled: bool = True
    kernel_sigma_frames: float = Field(2.0, gt=0)
    window_radius_frames: int = Field(6, ge=1)


class PTIOverrides(BaseModel):
    lpips_threshold: float = Field(0.03, gt=0)
    max_steps: int = Field(350, ge=0)
    lambda_l2: float = 1.0
    lambda_reg: float = 0.1
    locality_samples_per_step: int = 4
    step_size: float = 1e-3
    pivot_batch: int = 4
    budget_mode: Literal["total", "per_pivot"] = "total"


class TrainOverrides(BaseModel):
    steps: int = Field(50_000, ge=0)
    learning_rate: float = Field(5e-4, gt=0)
    batch_size: int = Field(4, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    sigma: float = Field(0.5, ge=0)


class PipelineConfig(BaseModel):
    k: int = Field(24, ge=2)
    beta: float = Field(0.02, ge=0)
    seed: int = 0
    smoothing: SmoothingOverrides = SmoothingOverrides()
    pti: PTIOverrides = PTIOverrides()
    train: TrainOverrides = TrainOverrides()


class AvatarRecord(BaseModel):
    id: str
    state: AvatarState
    created_at: str
    updated_at: str
    error: Optional[str] = None
    n_frames: int = 0
    artifacts: dict = Field(default_factory=dict)


class Progress(BaseModel):
    state: AvatarState
    stage: Optional[str] = None
    step: Optional[int] = None
    total_steps: Optional[int] = None
    loss: Optional[float] = None
    error: Optional[str] = None


class EditRef(BaseModel):
    name: str
    strength: float = 0.0


class ControlStateMsg(BaseModel):
    """One control-panel state; drives exactly one rendered frame."""

    seq: int = Field(ge=1)
    yaw: float = 0.0
    pitch: float = 0.0
    jaw: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    expr: list[float] = Field(default_factory=lambda: [0.0] * 50)
    edits: list[EditRef] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_dims(self):
        if len(self.jaw) != 3:
            raise ValueError("jaw must have 3 entries")
        if len(self.expr) != 50:
            raise ValueError("expr must have 50 entries")
        return self


class PlaybackMsg(BaseModel):
    type: Literal["playback"]
    seq: int = Field(ge=1)
    driving_id: str
    action: Literal["start", "pause", "seek"] = "start"
    index: int = Field(0, ge=0)


class DirectionInfo(BaseModel):
    name: str
    layers: int
    dim: int
    strength_range: tuple[float, float]


class PivotInfo(BaseModel):
    index: int
    frame_index: int
    yaw: float
    pitch: float
