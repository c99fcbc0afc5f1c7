"""HTTP face of the package.

One FastAPI app wraps the model: stateless one-shot endpoints (/run, /train,
/bench, /ablate) plus stateful streaming sessions that accept frames one at
a time and keep bounded per-session state. Every deliberate package error
maps to a stable JSON body and status code, mirroring the CLI exit codes.
"""

from __future__ import annotations

import copy
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import tensor as tk
from ..ablate import ablate
from ..bench import bench, linear_fit_r2
from ..config import RunConfig, apply_env_precision, run_config_from_dict
from ..errors import HierarqError, InputError, SequenceError
from ..model import HierarQModel, StreamingContext, closed_form_state_floats
from ..text import build_prompt_bundle, default_lexicon
from ..train import train_model
from .schemas import (AblateRequest, AblateResponse, AblationRowOut,
                      BenchRequest, BenchResponse, BenchRowOut, ErrorBody,
                      FrameGates, FrameRequest, FrameResponse, GateSummaryOut,
                      HealthResponse, OutputResponse, RunRequest, RunResponse,
                      SessionCreated, SessionRequest, TrainRequest,
                      TrainResponse)


@dataclass
class _Session:
    model: HierarQModel
    ctx: StreamingContext
    lock: threading.Lock = field(default_factory=threading.Lock)


def _status_for(err: HierarqError) -> int:
    if isinstance(err, SequenceError):
        return 409
    return 500 if err.exit_code == 2 else 400


def _gate_out(summary) -> GateSummaryOut:
    return GateSummaryOut(mean=summary.mean, peak=summary.peak, argmax=summary.argmax)


def create_app(base_cfg: RunConfig | None = None) -> FastAPI:
    app = FastAPI(title="hierarq", version=__version__)
    default_cfg = apply_env_precision(base_cfg if base_cfg is not None else RunConfig())
    default_cfg.validate()
    sessions: dict[str, _Session] = {}
    registry_lock = threading.Lock()

    def resolve_cfg(body_cfg: dict | None) -> RunConfig:
        if body_cfg is None:
            return copy.deepcopy(default_cfg)
        return apply_env_precision(run_config_from_dict(body_cfg))

    def get_session(session_id: str) -> _Session:
        with registry_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    @app.exception_handler(HierarqError)
    async def hierarq_error_handler(_: Request, err: HierarqError) -> JSONResponse:
        body = ErrorBody(error=type(err).__name__, message=str(err),
                         exit_code=err.exit_code)
        return JSONResponse(status_code=_status_for(err), content=body.model_dump())

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    # -- streaming sessions -------------------------------------------------

    @app.post("/sessions", response_model=SessionCreated)
    def create_session(body: SessionRequest) -> SessionCreated:
        cfg = resolve_cfg(body.config)
        model = HierarQModel(cfg)
        bundle = build_prompt_bundle(body.prompt, default_lexicon(),
                                     cfg.model.d_text, cfg.seed,
                                     cfg.model.max_prompt_tokens)
        session_id = uuid.uuid4().hex
        with registry_lock:
            sessions[session_id] = _Session(model=model, ctx=model.new_context(bundle))
        return SessionCreated(session_id=session_id,
                              frame_shape=[cfg.model.n_visual_tokens, cfg.model.d_visual],
                              precision=cfg.model.precision)

    @app.post("/sessions/{session_id}/frames", response_model=FrameResponse)
    def push_frame(session_id: str, body: FrameRequest) -> FrameResponse:
        session = get_session(session_id)
        tokens = np.asarray(body.tokens, dtype=session.model.dtype)
        with session.lock:
            session.model.process_frame(session.ctx, tk.Tensor(tokens),
                                        frame_index=body.frame_index)
            entry = session.ctx.gate_log[-1]
        return FrameResponse(frame=entry["frame"],
                             entity_gate=_gate_out(entry["entity"]),
                             scene_gate=_gate_out(entry["scene"]))

    @app.get("/sessions/{session_id}/output", response_model=OutputResponse)
    def session_output(session_id: str) -> OutputResponse:
        session = get_session(session_id)
        with session.lock:
            if session.ctx.t == 0:
                raise InputError("no frames processed yet")
            output = session.ctx.scene.last_output[0]
            logits = session.model.classify(tk.Tensor(output))
            state = session.ctx.state_floats()
            frames = session.ctx.t
        return OutputResponse(
            frames_processed=frames,
            output=output.astype(float).tolist(),
            label=int(logits.data.argmax()),
            label_scores=logits.data.astype(float).tolist(),
            state_floats=state,
            closed_form_state_floats=closed_form_state_floats(session.model.mc))

    @app.delete("/sessions/{session_id}")
    def close_session(session_id: str) -> dict:
        with registry_lock:
            if sessions.pop(session_id, None) is None:
                raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return {"closed": session_id}

    # -- one-shot endpoints --------------------------------------------------

    @app.post("/run", response_model=RunResponse)
    def run(body: RunRequest) -> RunResponse:
        cfg = resolve_cfg(body.config)
        model = HierarQModel(cfg)
        bundle = build_prompt_bundle(body.prompt, default_lexicon(),
                                     cfg.model.d_text, cfg.seed,
                                     cfg.model.max_prompt_tokens)
        features = np.asarray(body.features, dtype=model.dtype)
        result = model.process_video(features, bundle)
        logits = model.classify(result.output)
        gates = [FrameGates(frame=entry["frame"],
                            entity=_gate_out(entry["entity"]),
                            scene=_gate_out(entry["scene"]))
                 for entry in result.context.gate_log]
        return RunResponse(
            frames_processed=result.context.t,
            output=result.output.data.astype(float).tolist(),
            label=int(logits.data.argmax()),
            label_scores=logits.data.astype(float).tolist(),
            state_floats=result.context.state_floats(),
            closed_form_state_floats=closed_form_state_floats(model.mc),
            peak_state_floats=result.peak_state_floats,
            gates=gates)

    @app.post("/train", response_model=TrainResponse)
    def train_endpoint(body: TrainRequest) -> TrainResponse:
        cfg = resolve_cfg(body.config)
        if body.seed is not None:
            cfg.seed = body.seed
        _, report = train_model(cfg)
        return TrainResponse(seed=cfg.seed, steps_run=report.steps_run,
                             stopped_early=report.stopped_early,
                             final_val_loss=report.final_val_loss,
                             final_val_acc=report.final_val_acc,
                             wall_time_s=report.wall_time_s)

    @app.post("/bench", response_model=BenchResponse)
    def bench_endpoint(body: BenchRequest) -> BenchResponse:
        cfg = resolve_cfg(body.config)
        rows = bench(cfg, body.frames)
        r2 = linear_fit_r2([float(r.frames) for r in rows],
                           [r.wall_time for r in rows]) if len(rows) > 1 else 1.0
        return BenchResponse(
            rows=[BenchRowOut(frames=r.frames, peak_state_floats=r.peak_state_floats,
                              wall_time=r.wall_time, tokens_to_decoder=r.tokens_to_decoder,
                              closed_form_state_floats=r.closed_form_state_floats)
                  for r in rows],
            wall_time_r_squared=r2)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate_endpoint(body: AblateRequest) -> AblateResponse:
        cfg = resolve_cfg(body.config)
        rows = ablate(cfg, names=body.flags)
        return AblateResponse(
            rows=[AblationRowOut(name=r.name, description=r.description, steps=r.steps,
                                 val_loss=r.val_loss, val_acc=r.val_acc,
                                 is_default=r.is_default)
                  for r in rows])

    return app


def default_app() -> FastAPI:
    """App factory for `uvicorn hierarq.service.app:default_app --factory`."""
    return create_app()
