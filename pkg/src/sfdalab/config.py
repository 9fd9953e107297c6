"""Experiment configuration: JSON schema validation and default resolution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from .trainer import MODES, PRIOR_SOURCES, TrainConfig


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": list(MODES)},
        "prior": {"enum": list(PRIOR_SOURCES)},
        "delta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "sign": {"enum": [1, -1]},
        "lam": {"type": "number", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "lr_decay": {"type": "number", "exclusiveMinimum": 0},
        "lr_period": {"type": "integer", "minimum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "augment": {"type": "boolean"},
        "zero_tol": {"type": "number", "exclusiveMinimum": 0},
        "tagfree_epoch": {"type": ["integer", "null"], "minimum": 0},
        "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "save_checkpoints": {"type": "boolean"},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "output_dir", "target_data"],
    "properties": {
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "source_data": {"type": ["string", "null"]},
        "target_data": {"type": "string"},
        "prior_table": {"type": ["string", "null"]},
        "source_checkpoint": {"type": ["string", "null"]},
        "eval_split": {"enum": ["train", "val", "test"]},
        "source_train": _TRAIN_SCHEMA,
        "adapt": _TRAIN_SCHEMA,
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"spacing": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}},
        },
    },
}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    target_data: str
    source_data: Optional[str] = None
    prior_table: Optional[str] = None
    source_checkpoint: Optional[str] = None
    eval_split: str = "test"
    source_train: TrainConfig = field(default_factory=TrainConfig)
    adapt: TrainConfig = field(default_factory=TrainConfig)
    spacing: tuple = (1.0, 1.0, 1.0)

    def resolved(self) -> dict:
        return {
            "seed": self.seed, "output_dir": self.output_dir, "target_data": self.target_data,
            "source_data": self.source_data, "prior_table": self.prior_table,
            "source_checkpoint": self.source_checkpoint, "eval_split": self.eval_split,
            "source_train": self.source_train.to_dict(), "adapt": self.adapt.to_dict(),
            "metrics": {"spacing": list(self.spacing)},
        }


def _path_of(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate(raw: dict) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = [f"{_path_of(e)}: {e.message}" for e in errors]
        raise ConfigError("; ".join(msgs))


def from_dict(raw: dict) -> ExperimentConfig:
    validate(raw)
    seed = raw["seed"]
    src = dict(raw.get("source_train", {}))
    src.setdefault("seed", seed)
    src.setdefault("mode", "oracle")
    ada = dict(raw.get("adapt", {}))
    ada.setdefault("seed", seed)
    return ExperimentConfig(
        seed=seed, output_dir=raw["output_dir"], target_data=raw["target_data"],
        source_data=raw.get("source_data"), prior_table=raw.get("prior_table"),
        source_checkpoint=raw.get("source_checkpoint"), eval_split=raw.get("eval_split", "test"),
        source_train=TrainConfig.from_dict(src), adapt=TrainConfig.from_dict(ada),
        spacing=tuple(raw.get("metrics", {}).get("spacing", (1.0, 1.0, 1.0))),
    )


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)
