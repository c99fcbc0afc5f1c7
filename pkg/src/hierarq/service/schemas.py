"""Request and response bodies for the HTTP service.

Feature tokens travel as nested JSON float lists; shapes are validated by
the model itself so error messages match the CLI exactly.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    error: str
    message: str
    exit_code: int


class SessionRequest(BaseModel):
    prompt: str
    config: dict | None = None          # full run-config object, same schema as files


class SessionCreated(BaseModel):
    session_id: str
    frame_shape: list[int]              # expected per-frame token shape [N_v, D_vis]
    precision: str


class GateSummaryOut(BaseModel):
    mean: float
    peak: float
    argmax: int


class FrameRequest(BaseModel):
    tokens: list[list[float]]           # (N_v, D_vis)
    frame_index: int | None = None      # optional strict ordering check


class FrameResponse(BaseModel):
    frame: int
    entity_gate: GateSummaryOut
    scene_gate: GateSummaryOut


class OutputResponse(BaseModel):
    frames_processed: int
    output: list[list[float]]           # (N_q, D_q) scene queries
    label: int
    label_scores: list[float]
    state_floats: int
    closed_form_state_floats: int


class FrameGates(BaseModel):
    frame: int
    entity: GateSummaryOut
    scene: GateSummaryOut


class RunRequest(BaseModel):
    prompt: str
    features: list[list[list[float]]]   # (T, N_v, D_vis)
    config: dict | None = None


class RunResponse(OutputResponse):
    peak_state_floats: int
    gates: list[FrameGates]


class TrainRequest(BaseModel):
    config: dict | None = None
    seed: int | None = None


class TrainResponse(BaseModel):
    seed: int
    steps_run: int
    stopped_early: bool
    final_val_loss: float
    final_val_acc: float
    wall_time_s: float


class BenchRequest(BaseModel):
    frames: list[int] = Field(default=[100, 500, 1000])
    config: dict | None = None


class BenchRowOut(BaseModel):
    frames: int
    peak_state_floats: int
    wall_time: float
    tokens_to_decoder: int
    closed_form_state_floats: int


class BenchResponse(BaseModel):
    rows: list[BenchRowOut]
    wall_time_r_squared: float


class AblateRequest(BaseModel):
    flags: list[str] | None = None      # variant names; omit for the full table
    config: dict | None = None


class AblationRowOut(BaseModel):
    name: str
    description: str
    steps: int
    val_loss: float
    val_acc: float
    is_default: bool


class AblateResponse(BaseModel):
    rows: list[AblationRowOut]
