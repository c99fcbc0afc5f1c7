"""Configuration types and strict JSON loading.

Config files are UTF-8 JSON. Unknown keys are rejected at every level so a
typo never silently falls back to a default. The HIERARQ_PRECISION
environment variable (f32 or f64) overrides the configured precision.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

PRECISIONS = ("f32", "f64")
POLICIES = ("fifo", "mbc")
GRANULARITIES = ("token", "frame")
TASKS = ("entity-id", "forward", "bench")
ENV_PRECISION = "HIERARQ_PRECISION"


@dataclass
class ModelConfig:
    """Shape of the model; desk-scale defaults (full scale is the same code)."""

    n_visual_tokens: int = 16     # tokens per frame (N_v)
    d_visual: int = 32            # frame token width
    n_query_tokens: int = 8       # learned queries per stream (N_q)
    d_query: int = 32             # query width
    n_layers: int = 2             # layers per querying transformer
    n_heads: int = 4              # heads in querying-transformer attention
    cross_attention_frequency: int = 2   # visual cross-attention every k-th layer
    modulator_layers: int = 2
    modulator_heads: int = 8
    d_text: int = 32              # prompt token embedding width
    max_prompt_tokens: int = 32
    m_short: int = 10             # entity-stream bank capacity
    m_long: int = 10              # scene-stream bank capacity
    n_classes: int = 4            # classification head width
    precision: str = "f32"
    detach_bank_entries: bool = True      # False extends backprop through bank history
    mbc_weighted_merge: bool = False      # count-weighted running-mean merging
    scene_submodules_all_layers: bool = False  # extra scene sublayers at every layer
    decoder_stub: bool = False            # optional generative head
    decoder_vocab: int = 64

    def validate(self) -> "ModelConfig":
        positive = ("n_visual_tokens", "d_visual", "n_query_tokens", "d_query",
                    "n_layers", "n_heads", "cross_attention_frequency",
                    "modulator_layers", "modulator_heads", "d_text",
                    "max_prompt_tokens", "m_short", "m_long", "n_classes",
                    "decoder_vocab")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_query % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_query={self.d_query}")
        if self.d_visual % self.modulator_heads:
            raise ConfigError(f"modulator_heads={self.modulator_heads} must divide d_visual={self.d_visual}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"model.precision must be one of {PRECISIONS}, got {self.precision!r}")
        return self


@dataclass
class OptimizerConfig:
    step_size: float = 1e-3
    steps: int = 2000
    batch_size: int = 16

    def validate(self) -> "OptimizerConfig":
        if self.step_size <= 0:
            raise ConfigError(f"optimizer.step_size must be > 0, got {self.step_size}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("optimizer.steps must be >= 0 and batch_size >= 1")
        return self


@dataclass
class SyntheticConfig:
    """Knobs for the built-in planted-signature task."""

    classes: int = 4
    frames: int = 20
    frames_per_occurrence: int = 1   # plant the label signature every k-th frame
    plant_frames: int = 0            # restrict label plants to the first k frames (0 = no limit)
    background_every: int = 1        # plant the un-prompted background signature every k-th frame
    noise_scale: float = 0.4
    plant_scale: float = 4.0         # planted-token magnitude, sized against the position code
    train_samples: int = 512
    val_samples: int = 128
    prompt: str = "which entity is present: man, dog, ball or car"

    def validate(self) -> "SyntheticConfig":
        if self.classes < 1:
            raise ConfigError("synthetic.classes must be >= 1")
        if self.frames < 1:
            raise ConfigError("synthetic.frames must be >= 1")
        if self.frames_per_occurrence < 1 or self.background_every < 1:
            raise ConfigError("synthetic occurrence intervals must be >= 1")
        if self.plant_frames < 0:
            raise ConfigError("synthetic.plant_frames must be >= 0")
        if self.noise_scale < 0:
            raise ConfigError("synthetic.noise_scale must be >= 0")
        if self.plant_scale <= 0:
            raise ConfigError("synthetic.plant_scale must be > 0")
        if self.train_samples < 1 or self.val_samples < 1:
            raise ConfigError("synthetic sample counts must be >= 1")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 0
    task: str = "entity-id"
    disable_entity_stream: bool = False      # bypass the entity modulator
    disable_scene_modulator: bool = False    # bypass the scene modulator
    disable_hierarchical_link: bool = False  # cut the entity->scene coupling
    short_policy: str = "fifo"               # entity-stream bank policy
    long_policy: str = "mbc"                 # scene-stream bank policy
    compression_granularity: str = "token"
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.optimizer.validate()
        self.synthetic.validate()
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.short_policy not in POLICIES or self.long_policy not in POLICIES:
            raise ConfigError(f"bank policies must be one of {POLICIES}")
        if self.compression_granularity not in GRANULARITIES:
            raise ConfigError(f"compression_granularity must be one of {GRANULARITIES}")
        return self


_NESTED = {"model": ModelConfig, "optimizer": OptimizerConfig, "synthetic": SyntheticConfig}


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        sub = _NESTED.get(name)
        if sub is not None:
            kwargs[name] = _from_dict(sub, value, f"{where}.{name}")
            continue
        want = fields[name].type
        if want == "bool" and not isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected a boolean, got {value!r}")
        if want == "int" and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{where}.{name}: expected an integer, got {value!r}")
        if want == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number, got {value!r}")
            value = float(value)
        if want == "str" and not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "config").validate()


def apply_env_precision(cfg: RunConfig, env: dict | None = None) -> RunConfig:
    """Overlay the HIERARQ_PRECISION environment variable, if set."""
    env = os.environ if env is None else env
    override = env.get(ENV_PRECISION)
    if override is not None:
        if override not in PRECISIONS:
            raise ConfigError(f"{ENV_PRECISION} must be one of {PRECISIONS}, got {override!r}")
        cfg.model.precision = override
    return cfg


def load_run_config(path: str, env: dict | None = None) -> RunConfig:
    """Parse a JSON config file, apply the precision env override, validate."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return apply_env_precision(run_config_from_dict(data), env)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
