"""Latency and live-state benchmark.

For each frame count the harness synthesizes a stream, runs it through a
fresh streaming context, and records the measured peak of live state floats,
the closed-form bound, wall time, and the (constant) number of tokens handed
to the head. State is counted in floats on purpose: allocator and interpreter
overhead are not reproducible claims, the model's live state is.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .encode import make_signatures, synthesize_video
from .errors import ConfigError
from .model import HierarQModel, closed_form_state_floats
from .train import prompt_bundle


@dataclass
class BenchRow:
    frames: int
    peak_state_floats: int
    wall_time: float
    tokens_to_decoder: int
    closed_form_state_floats: int


CSV_HEADER = "T,peak_state_floats,wall_time,tokens_to_decoder,closed_form_state_floats"


def bench(cfg: RunConfig, frame_counts: list[int],
          csv_path: str | None = None) -> list[BenchRow]:
    cfg.validate()
    if not frame_counts:
        raise ConfigError("bench needs at least one frame count")
    if any(b <= a for a, b in zip(frame_counts, frame_counts[1:])):
        raise ConfigError(f"frame counts must be ascending, got {frame_counts}")
    if min(frame_counts) < 1:
        raise ConfigError("frame counts must be >= 1")

    model = HierarQModel(cfg)
    bundle = prompt_bundle(cfg)
    sigs = make_signatures(cfg.model.d_visual, cfg.synthetic.classes, cfg.seed)
    bound = closed_form_state_floats(cfg.model)

    rows: list[BenchRow] = []
    for t in frame_counts:
        rng = np.random.default_rng([cfg.seed, t])
        syn = dataclasses.replace(cfg.synthetic, frames=t)
        video = synthesize_video(rng, syn, cfg.model, sigs, label=0)
        features = video.tokens.astype(model.dtype)
        started = time.perf_counter()
        result = model.process_video(features, bundle)
        elapsed = time.perf_counter() - started
        rows.append(BenchRow(
            frames=t,
            peak_state_floats=result.peak_state_floats,
            wall_time=elapsed,
            tokens_to_decoder=result.output.shape[-2],
            closed_form_state_floats=bound,
        ))
    if csv_path is not None:
        write_bench_csv(csv_path, rows)
    return rows


def write_bench_csv(path: str, rows: list[BenchRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.frames},{r.peak_state_floats},{r.wall_time:.6f},"
                     f"{r.tokens_to_decoder},{r.closed_form_state_floats}\n")


def linear_fit_r2(xs: list[float], ys: list[float]) -> float:
    """R-squared of the least-squares line through (xs, ys)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 2:
        raise ConfigError("need at least two points for a fit")
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = y - y.mean()
    denom = float(total @ total)
    if denom == 0.0:
        return 1.0
    return 1.0 - float(residual @ residual) / denom
