"""Experiment configuration: YAML documents validated against a JSON schema."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .continual import STRATEGIES, RunManifest, StrategyConfig, TrainConfig

CONFIG_FORMAT = "serdiff-config/1"
OUTPUT_ROOT_ENV = "SERDIFF_OUTPUT_ROOT"

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "serdiff experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["output_dir"],
    "properties": {
        "format": {"const": CONFIG_FORMAT},
        "output_dir": {"type": "string", "minLength": 1},
        "base_seed": {"type": "integer"},
        "n_tasks": {"type": "integer", "minimum": 2},
        "n_samples": _pos_int,
        "image_size": {"type": "integer", "minimum": 16, "multipleOf": 8},
        "split": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "strategies": {"type": "array", "items": {"enum": list(STRATEGIES)}, "minItems": 1},
        "strategy_params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lam": {"type": "number", "minimum": 0},
                "kd_weight": {"type": "number", "minimum": 0},
                "ewc_strength": {"type": "number", "minimum": 0},
                "replay_ratio": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _pos_int,
                "batch_size": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "cosine": {"type": "boolean"},
                "teacher_epochs": _pos_int,
                "teacher_lr": {"type": "number", "exclusiveMinimum": 0},
                "teacher_snapshot_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "teacher_freeze_encoder": {"type": "boolean"},
                "diffusion_steps": {"type": "integer", "minimum": 2},
                "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "fisher_batches": _pos_int,
                "base_channels": _pos_int,
                "depth": {"type": "integer", "minimum": 2},
                "embed_dim": _pos_int,
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "surface": {"type": "boolean"},
                "plots": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS: dict = {
    "format": CONFIG_FORMAT,
    "base_seed": 0,
    "n_tasks": 3,
    "n_samples": 200,
    "image_size": 64,
    "split": [0.8, 0.1, 0.1],
    "seeds": [0, 1, 2],
    "strategies": ["naive", "kd", "ewc", "ser_diff"],
    "strategy_params": {},
    "train": {},
    "metrics": {"surface": True, "plots": True},
}


class ConfigError(ValueError):
    """Invalid configuration document."""


@dataclass
class RunConfig:
    raw: dict
    output_dir: Path
    seeds: list[int] = field(default_factory=list)
    strategies: list[str] = field(default_factory=list)
    surface: bool = True
    plots: bool = True

    def manifest(self, strategy: str, seed: int, **overrides) -> RunManifest:
        params = {**self.raw.get("strategy_params", {}), **overrides}
        return RunManifest(
            base_seed=self.raw["base_seed"],
            seed=seed,
            n_tasks=self.raw["n_tasks"],
            n_samples=self.raw["n_samples"],
            image_size=self.raw["image_size"],
            split=tuple(self.raw["split"]),
            strategy=StrategyConfig(strategy, **params),
            train=TrainConfig(**self.raw.get("train", {})),
        )

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    def run_dir(self, strategy: str, seed: int) -> Path:
        return self.output_dir / "runs" / f"{strategy}_seed{seed}"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def _error_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        return f"{path + '.' if path else ''}<unknown key> ({err.message})"
    return path or "<root>"


def validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{_error_path(e)}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    if abs(sum(doc.get("split", [0.8, 0.1, 0.1])) - 1.0) > 1e-9:
        raise ConfigError("split: fractions must sum to 1")


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level")
    validate(doc)
    raw = copy.deepcopy(DEFAULTS)
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    try:  # surface range errors from the dataclasses as config errors
        TrainConfig(**raw["train"]).schedule()
        StrategyConfig("naive", **raw["strategy_params"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(os.environ.get(OUTPUT_ROOT_ENV) or raw["output_dir"])
    return RunConfig(
        raw=raw,
        output_dir=out,
        seeds=list(raw["seeds"]),
        strategies=list(raw["strategies"]),
        surface=raw["metrics"].get("surface", True),
        plots=raw["metrics"].get("plots", True),
    )


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return from_dict(doc)
