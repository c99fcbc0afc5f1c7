"""Command-line interface.

Subcommands: run (stream one feature file), train, bench, ablate, serve.
Success prints results to stdout (or --out); deliberate failures print one
machine-readable JSON line to stderr and exit 1 (input or configuration)
or 2 (numerical). All outputs except wall-clock timings are bit-reproducible
for a fixed (config, seed) pair.
"""

from __future__ import annotations

import json
import sys

import click

from . import __version__
from .ablate import ablate as run_ablate
from .ablate import variant_names, write_ablation_csv
from .bench import bench as run_bench
from .bench import linear_fit_r2, write_bench_csv
from .config import RunConfig, apply_env_precision, load_run_config
from .container import read_checkpoint, read_features, load_into_parameters
from .errors import ConfigError, HierarqError
from .model import HierarQModel, closed_form_state_floats
from .text import build_prompt_bundle, default_lexicon
from .train import train as run_train


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return apply_env_precision(RunConfig()).validate()
    return load_run_config(path)


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of integers, got {text!r}")
    if not values:
        raise ConfigError(f"{what} must name at least one value")
    return values


@click.group()
@click.version_option(version=__version__, prog_name="hierarq")
def cli() -> None:
    """Task-aware streaming video understanding with bounded memory."""


@cli.command()
@click.option("--features", "features_path", required=True,
              help="Feature container to stream (one video).")
@click.option("--prompt", required=True, help="Task prompt conditioning both streams.")
@click.option("--config", "config_path", default=None, help="Run-config JSON file.")
@click.option("--checkpoint", "checkpoint_path", default=None,
              help="Optional trained weights to load before running.")
@click.option("--out", "out_path", default=None,
              help="Write the result JSON here instead of stdout.")
def run(features_path: str, prompt: str, config_path: str | None,
        checkpoint_path: str | None, out_path: str | None) -> None:
    """Stream one video and report the embedding, label, and gate log."""
    cfg = _load_config(config_path)
    model = HierarQModel(cfg)
    if checkpoint_path is not None:
        load_into_parameters(model.parameters(), read_checkpoint(checkpoint_path))
    bundle = build_prompt_bundle(prompt, default_lexicon(), cfg.model.d_text,
                                 cfg.seed, cfg.model.max_prompt_tokens)
    features = read_features(features_path)
    result = model.process_video(features, bundle)
    logits = model.classify(result.output)

    payload = {
        "prompt": prompt,
        "frames_processed": result.context.t,
        "label": int(logits.data.argmax()),
        "label_scores": [float(v) for v in logits.data],
        "output": [[float(v) for v in row] for row in result.output.data],
        "state_floats": result.context.state_floats(),
        "peak_state_floats": result.peak_state_floats,
        "closed_form_state_floats": closed_form_state_floats(cfg.model),
        "gates": [
            {
                "frame": entry["frame"],
                "entity": {"mean": entry["entity"].mean, "peak": entry["entity"].peak,
                           "argmax": entry["entity"].argmax},
                "scene": {"mean": entry["scene"].mean, "peak": entry["scene"].peak,
                          "argmax": entry["scene"].argmax},
            }
            for entry in result.context.gate_log
        ],
    }
    text = json.dumps(payload, indent=2)
    if out_path is None:
        click.echo(text)
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        click.echo(f"wrote {out_path}")


@cli.command()
@click.option("--config", "config_path", default=None, help="Run-config JSON file.")
@click.option("--seed", default=None, type=int, help="Override the config seed.")
@click.option("--out-dir", default=None, help="Artifact directory (default runs/seed<seed>).")
def train(config_path: str | None, seed: int | None, out_dir: str | None) -> None:
    """Train on the built-in planted-signature task; write curve and weights."""
    cfg = _load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    report = run_train(cfg, out_dir=out_dir)
    click.echo(json.dumps({
        "seed": cfg.seed,
        "steps_run": report.steps_run,
        "stopped_early": report.stopped_early,
        "final_val_loss": report.final_val_loss,
        "final_val_acc": report.final_val_acc,
        "wall_time_s": report.wall_time_s,
        "curve": report.curve_path,
        "checkpoint": report.checkpoint_path,
        "summary": report.summary_path,
    }, indent=2))


@cli.command()
@click.option("--frames", default="100,500,1000", show_default=True,
              help="Comma-separated frame counts to stream.")
@click.option("--csv", "csv_path", default=None, help="Write the table here as CSV.")
@click.option("--config", "config_path", default=None, help="Run-config JSON file.")
def bench(frames: str, csv_path: str | None, config_path: str | None) -> None:
    """Measure state size and wall time across video lengths."""
    cfg = _load_config(config_path)
    frame_counts = _parse_int_list(frames, "--frames")
    rows = run_bench(cfg, frame_counts)
    if csv_path is not None:
        write_bench_csv(csv_path, rows)
    r2 = (linear_fit_r2([float(r.frames) for r in rows], [r.wall_time for r in rows])
          if len(rows) > 1 else 1.0)
    click.echo(json.dumps({
        "rows": [
            {"frames": r.frames, "peak_state_floats": r.peak_state_floats,
             "wall_time": r.wall_time, "tokens_to_decoder": r.tokens_to_decoder,
             "closed_form_state_floats": r.closed_form_state_floats}
            for r in rows
        ],
        "wall_time_r_squared": r2,
        "csv": csv_path,
    }, indent=2))


@cli.command()
@click.option("--config", "config_path", default=None, help="Run-config JSON file.")
@click.option("--flags", default=None,
              help="Comma-separated variant names (default: the full table).")
@click.option("--csv", "csv_path", default=None, help="Write the table here as CSV.")
@click.option("--list", "list_only", is_flag=True, help="List variant names and exit.")
def ablate(config_path: str | None, flags: str | None, csv_path: str | None,
           list_only: bool) -> None:
    """Train the component-knockout table on the planted-signature task."""
    if list_only:
        click.echo("\n".join(variant_names()))
        return
    cfg = _load_config(config_path)
    names = None
    if flags is not None:
        names = [part.strip() for part in flags.split(",") if part.strip()]
        if not names:
            raise ConfigError("--flags must name at least one variant")
    rows = run_ablate(cfg, names=names)
    if csv_path is not None:
        write_ablation_csv(csv_path, rows)
    click.echo(json.dumps({
        "rows": [
            {"name": r.name, "description": r.description, "steps": r.steps,
             "val_loss": r.val_loss, "val_acc": r.val_acc, "is_default": r.is_default}
            for r in rows
        ],
        "csv": csv_path,
    }, indent=2))


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True, type=int)
@click.option("--config", "config_path", default=None, help="Run-config JSON file.")
def serve(host: str, port: int, config_path: str | None) -> None:
    """Start the HTTP service (sessions, /run, /train, /bench, /ablate)."""
    import uvicorn

    from .service import create_app

    app = create_app(_load_config(config_path))
    uvicorn.run(app, host=host, port=port)


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        line = json.dumps({"error": "UsageError", "message": exc.format_message(),
                           "exit_code": 1})
        click.echo(line, err=True)
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(1)
    except HierarqError as exc:
        line = json.dumps({"error": type(exc).__name__, "message": str(exc),
                           "exit_code": exc.exit_code})
        click.echo(line, err=True)
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    main()
