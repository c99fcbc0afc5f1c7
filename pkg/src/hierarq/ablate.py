"""Ablation harness.

Every row trains the same number of steps on the same seed and data, varying
exactly one aspect of the architecture: memory capacities, bank policies,
compression granularity, the entity-to-scene coupling, and the two
modulators. Rows are directly comparable by final validation loss/accuracy;
the fifo_mbc row is the unmodified default configuration.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

from .config import RunConfig
from .errors import ConfigError
from .model import HierarQModel
from .train import train_model


@dataclass
class AblationRow:
    name: str
    description: str
    steps: int
    val_loss: float
    val_acc: float
    is_default: bool = False


@dataclass
class _Variant:
    name: str
    description: str
    config: dict          # RunConfig field overrides
    model: dict           # ModelConfig field overrides
    capacities: dict      # bank capacity overrides ("visual"/"query")
    is_default: bool = False


def _variants() -> list[_Variant]:
    v = lambda name, desc, config=None, model=None, caps=None, default=False: _Variant(
        name, desc, config or {}, model or {}, caps or {}, default)
    return [
        v("fifo_mbc", "default: short-term fifo, long-term compressed", default=True),
        v("no_memory", "all banks capacity 1 (current frame only)",
          model={"m_short": 1, "m_long": 1}),
        v("visual_only", "query banks capacity 1", caps={"query": 1}),
        v("query_only", "visual banks capacity 1", caps={"visual": 1}),
        v("short_only", "long-term banks capacity 1", model={"m_long": 1}),
        v("long_only", "short-term banks capacity 1", model={"m_short": 1}),
        v("fifo_fifo", "both streams evict oldest-first",
          config={"long_policy": "fifo"}),
        v("mbc_mbc", "both streams merge by cosine",
          config={"short_policy": "mbc"}),
        v("no_hierarchy", "entity-to-scene coupling cut",
          config={"disable_hierarchical_link": True}),
        v("mbc_frame", "like mbc_mbc but merging whole frames, not token rows",
          config={"short_policy": "mbc", "compression_granularity": "frame"}),
        v("no_modulators", "both feature modulators bypassed",
          config={"disable_entity_stream": True, "disable_scene_modulator": True}),
        v("entity_modulator_only", "scene modulator bypassed",
          config={"disable_scene_modulator": True}),
        v("scene_modulator_only", "entity modulator bypassed",
          config={"disable_entity_stream": True}),
    ]


def variant_names() -> list[str]:
    return [v.name for v in _variants()]


def _apply(cfg: RunConfig, variant: _Variant) -> RunConfig:
    out = copy.deepcopy(cfg)
    for key, value in variant.config.items():
        setattr(out, key, value)
    for key, value in variant.model.items():
        setattr(out.model, key, value)
    return out.validate()


def ablate(cfg: RunConfig, names: list[str] | None = None,
           csv_path: str | None = None) -> list[AblationRow]:
    """Train each requested variant at equal steps on identical seed/data."""
    cfg.validate()
    table = {v.name: v for v in _variants()}
    if names is None:
        chosen = list(table.values())
    else:
        unknown = sorted(set(names) - set(table))
        if unknown:
            raise ConfigError(f"unknown ablation rows {unknown}; valid: {sorted(table)}")
        chosen = [table[n] for n in names]
    if not chosen:
        raise ConfigError("no ablation rows selected")

    rows: list[AblationRow] = []
    for variant in chosen:
        run_cfg = _apply(cfg, variant)
        model = HierarQModel(run_cfg, capacity_overrides=variant.capacities)
        _, report = train_model(run_cfg, model=model, early_stop=False,
                                eval_every=max(1, run_cfg.optimizer.steps))
        rows.append(AblationRow(
            name=variant.name,
            description=variant.description,
            steps=report.steps_run,
            val_loss=report.final_val_loss,
            val_acc=report.final_val_acc,
            is_default=variant.is_default,
        ))
    if csv_path is not None:
        write_ablation_csv(csv_path, rows)
    return rows


def write_ablation_csv(path: str, rows: list[AblationRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,description,steps,val_loss,val_acc,is_default\n")
        for r in rows:
            fh.write(f"{r.name},\"{r.description}\",{r.steps},"
                     f"{r.val_loss:.9g},{r.val_acc:.6g},{int(r.is_default)}\n")
