"""Trainer for the planted-signature task.

Adam on cross entropy over the scene-stream output, frozen stub encoder,
deterministic batch sampling from the run seed. Divergence (non-finite loss)
aborts with a numerical error. Reports are written as a per-step CSV curve,
a JSON summary, and a checkpoint; everything except wall-clock timing is
bit-reproducible for a fixed (config, seed) pair.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .config import RunConfig
from .container import write_checkpoint
from .encode import make_splits
from .errors import ConfigError, NumericalError
from .model import HierarQModel
from .text import PromptBundle, build_prompt_bundle, default_lexicon

EVAL_BATCH = 64


@dataclass
class EvalPoint:
    step: int
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    steps_run: int
    train_losses: list[float]
    evals: list[EvalPoint]
    final_val_loss: float
    final_val_acc: float
    stopped_early: bool
    wall_time_s: float
    checkpoint_path: str | None = None
    curve_path: str | None = None
    summary_path: str | None = None


class Adam:
    def __init__(self, params: dict[str, tk.Tensor], step_size: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= (self.lr * (m / b1c) /
                       (np.sqrt(v / b2c) + self.eps)).astype(p.data.dtype)


def prompt_bundle(cfg: RunConfig) -> PromptBundle:
    mc = cfg.model
    return build_prompt_bundle(cfg.synthetic.prompt, default_lexicon(),
                               mc.d_text, cfg.seed, mc.max_prompt_tokens)


def evaluate(model: HierarQModel, bundle: PromptBundle, features: np.ndarray,
             labels: np.ndarray, batch: int = EVAL_BATCH) -> tuple[float, float]:
    """Mean cross entropy and accuracy over a labelled corpus."""
    total_loss = 0.0
    hits = 0
    n = features.shape[0]
    for lo in range(0, n, batch):
        chunk = features[lo:lo + batch]
        chunk_labels = labels[lo:lo + batch]
        logits = model.classify(model.process_video(chunk, bundle).output)
        loss = tk.cross_entropy(logits, chunk_labels)
        total_loss += loss.item() * chunk.shape[0]
        hits += int((logits.data.argmax(axis=1) == chunk_labels).sum())
    return total_loss / n, hits / n


def train_model(cfg: RunConfig, model: HierarQModel | None = None,
                max_steps: int | None = None, early_stop: bool = True,
                target_acc: float = 0.90, eval_every: int = 25,
                out_dir: str | None = None) -> tuple[HierarQModel, TrainReport]:
    """Run the optimization loop; returns the trained model and its report."""
    cfg.validate()
    if cfg.task != "entity-id":
        raise ConfigError(f"training needs task=entity-id, got {cfg.task!r}")
    if model is None:
        model = HierarQModel(cfg)
    bundle = prompt_bundle(cfg)
    _, (train_x, train_y), (val_x, val_y) = make_splits(cfg.synthetic, cfg.model, cfg.seed)
    train_x = train_x.astype(model.dtype)
    val_x = val_x.astype(model.dtype)

    params = model.parameters()
    opt = Adam(params, cfg.optimizer.step_size)
    sampler = np.random.default_rng([cfg.seed, 0xA5])
    steps = cfg.optimizer.steps if max_steps is None else max_steps
    batch = min(cfg.optimizer.batch_size, train_x.shape[0])

    losses: list[float] = []
    evals: list[EvalPoint] = []
    stopped = False
    started = time.perf_counter()
    step = 0
    while step < steps:
        step += 1
        idx = sampler.choice(train_x.shape[0], size=batch, replace=False)
        for p in params.values():
            p.grad = None
        with tk.GradientTape() as tape:
            out = model.process_video(train_x[idx], bundle).output
            loss = tk.cross_entropy(model.classify(out), train_y[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"training diverged: non-finite loss at step {step}")
        tape.backward(loss)
        opt.step()
        losses.append(value)

        if step % eval_every == 0 or step == steps:
            val_loss, val_acc = evaluate(model, bundle, val_x, val_y)
            evals.append(EvalPoint(step=step, val_loss=val_loss, val_acc=val_acc))
            if early_stop and val_acc >= target_acc:
                stopped = True
                break

    if not evals or evals[-1].step != step:
        val_loss, val_acc = evaluate(model, bundle, val_x, val_y)
        evals.append(EvalPoint(step=step, val_loss=val_loss, val_acc=val_acc))
    report = TrainReport(
        steps_run=step,
        train_losses=losses,
        evals=evals,
        final_val_loss=evals[-1].val_loss,
        final_val_acc=evals[-1].val_acc,
        stopped_early=stopped,
        wall_time_s=time.perf_counter() - started,
    )
    if out_dir is not None:
        _write_report(cfg, model, report, out_dir)
    return model, report


def _write_report(cfg: RunConfig, model: HierarQModel, report: TrainReport,
                  out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    curve = os.path.join(out_dir, "curve.csv")
    by_step = {e.step: e for e in report.evals}
    with open(curve, "w", encoding="utf-8") as fh:
        fh.write("step,train_loss,val_loss,val_acc\n")
        for i, value in enumerate(report.train_losses, start=1):
            e = by_step.get(i)
            tail = f",{e.val_loss:.9g},{e.val_acc:.6g}" if e else ",,"
            fh.write(f"{i},{value:.9g}{tail}\n")
    ckpt = os.path.join(out_dir, "weights.hqw")
    write_checkpoint(ckpt, {k: p.data for k, p in model.parameters().items()})
    summary = os.path.join(out_dir, "summary.json")
    with open(summary, "w", encoding="utf-8") as fh:
        json.dump({
            "task": cfg.task,
            "seed": cfg.seed,
            "steps_run": report.steps_run,
            "stopped_early": report.stopped_early,
            "final_val_loss": report.final_val_loss,
            "final_val_acc": report.final_val_acc,
            "wall_time_s": round(report.wall_time_s, 3),
            "checkpoint": os.path.basename(ckpt),
            "curve": os.path.basename(curve),
        }, fh, indent=2)
        fh.write("\n")
    report.checkpoint_path = ckpt
    report.curve_path = curve
    report.summary_path = summary


def train(cfg: RunConfig, out_dir: str | None = None) -> TrainReport:
    """Spec surface: train per config, write reports under the run directory."""
    target = out_dir if out_dir is not None else os.path.join(cfg.out_dir, f"seed{cfg.seed}")
    _, report = train_model(cfg, out_dir=target)
    return report
