"""Experiment configuration: YAML documents validated against a schema.

One document drives one command. Sections: dataset, target, trojan,
attack, train, eval; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import yaml

from .core import ConfigSchemaError

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["mnist", "cifar10"]},
                "cache_dir": {"type": ["string", "null"]},
            },
            "required": ["name"],
        },
        "target": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backbone": {"enum": ["cnn_small", "resnet18", "vgg9", "alexnet"]},
                "seed": {"type": "integer"},
                "checkpoint": {"type": ["string", "null"]},
            },
            "required": ["backbone"],
        },
        "trojan": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "width_multiplier": {"enum": [1.0, 0.5]},
                "seed": {"type": "integer"},
                "checkpoint": {"type": ["string", "null"]},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["fgsm", "bim_k", "c_fgsm", "c_bim_k"]},
                "mode": {"enum": ["untargeted", "targeted"]},
                "eps": {"type": "number", "minimum": 0},
                "steps": {"type": "integer", "minimum": 1},
                "step_size": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "lambda": {"type": "number", "minimum": 0, "maximum": 1},
                "c_h": {"type": "number", "minimum": 0},
                "concealment": {"enum": ["logit_l2", "ce"]},
                "label_source": {"enum": ["ground_truth", "predicted"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "optimizer": {"enum": ["adam", "sgd"]},
                "momentum": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "augment": {"type": "boolean"},
                "beta": {"type": "number", "minimum": 0, "maximum": 1},
                "attack_kind": {
                    "enum": ["c_fgsm", "c_bim_k_untargeted", "c_bim_k_targeted"]
                },
                "c_i": {"type": ["number", "null"], "minimum": 0},
                "lr_start": {"type": "number", "exclusiveMinimum": 0},
                "lr_end": {"type": "number", "exclusiveMinimum": 0},
                "eval_examples": {"type": "integer", "minimum": 0},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "limit": {"type": ["integer", "null"], "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "dump_n": {"type": "integer", "minimum": 1},
                "holdout_classes": {
                    "type": "array", "items": {"type": "integer"}, "minItems": 1,
                },
                "sweep": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["epsilon", "lambda", "c_h"]},
                        "values": {
                            "type": "array",
                            "items": {"type": "number"},
                            "minItems": 1,
                        },
                    },
                },
                "surface": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "span": {"type": "number", "exclusiveMinimum": 0},
                        "resolution": {"type": "integer", "minimum": 3},
                        "images": {"type": "integer", "minimum": 1},
                    },
                },
                "transfer": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "trojans": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "additionalProperties": False,
                                "properties": {
                                    "name": {"type": "string"},
                                    "checkpoint": {"type": ["string", "null"]},
                                    "width_multiplier": {"enum": [1.0, 0.5]},
                                },
                                "required": ["name"],
                            },
                        },
                        "targets": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "additionalProperties": False,
                                "properties": {
                                    "name": {"type": "string"},
                                    "backbone": {
                                        "enum": ["cnn_small", "resnet18", "vgg9", "alexnet"]
                                    },
                                    "checkpoint": {"type": "string"},
                                },
                                "required": ["name", "backbone", "checkpoint"],
                            },
                        },
                        "attacks": {
                            "type": "array",
                            "items": {"enum": ["fgsm", "bim_k", "c_fgsm", "c_bim_k"]},
                            "minItems": 1,
                        },
                    },
                },
            },
        },
    },
    "required": ["dataset"],
}

DEFAULTS = {
    "seed": 0,
    "target": {"backbone": "cnn_small", "seed": 0, "checkpoint": None},
    "trojan": None,
    "attack": {
        "kind": "c_fgsm",
        "mode": "untargeted",
        "eps": 0.05,
        "steps": 1,
        "step_size": None,
        "lambda": 1.0,
        "c_h": 0.0,
        "concealment": "logit_l2",
        "label_source": "ground_truth",
    },
    "train": {
        "epochs": 10,
        "batch_size": 128,
        "lr": 1e-3,
        "optimizer": "adam",
        "momentum": 0.9,
        "weight_decay": 0.0,
        "augment": False,
        "beta": 0.5,
        "attack_kind": "c_fgsm",
        "c_i": None,
        "lr_start": 1e-3,
        "lr_end": 1e-4,
        "eval_examples": 512,
    },
    "eval": {
        "limit": None,
        "batch_size": 128,
        "dump_n": 5,
    },
}

TROJAN_DEFAULTS = {"width_multiplier": 1.0, "seed": 1, "checkpoint": None}


def _merge(base, override):
    if isinstance(base, dict) and isinstance(override, dict):
        out = dict(base)
        for k, v in override.items():
            out[k] = _merge(base.get(k), v)
        return out
    return copy.deepcopy(override) if override is not None else copy.deepcopy(base)


def validate_config(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigSchemaError(f"config invalid at {where}: {exc.message}") from exc


def load_config(path: str | Path) -> dict:
    """Read, validate, and resolve a config document against the defaults."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigSchemaError(f"config {path} is not a mapping")
    validate_config(doc)
    resolved = _merge(DEFAULTS, doc)
    resolved["dataset"].setdefault("cache_dir", None)
    if doc.get("trojan") is not None:
        resolved["trojan"] = _merge(TROJAN_DEFAULTS, doc["trojan"])
    validate_config(resolved)
    return resolved


def config_hash(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
