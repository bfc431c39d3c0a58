"""Run configuration: JSON document with per-section defaults, strict schema
validation (unknown keys rejected), and dotted-path overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any

import jsonschema

DEFAULTS: dict[str, Any] = {
    "data": {
        "kind": "shift_invariant_texture",
        "image_h": 64,
        "image_w": 64,
        "n_classes": 4,
        "train_size": 512,
        "eval_size": 128,
        "seed": 0,
        "augment": True,
    },
    "tokenizer": {
        "kind": "linear",
        "n_tokens": 16,
        "token_channels": 16,
        "seed": 0,
        "exact": False,
        "latent_channels": 64,
        "base_channels": 32,
        "downsample_f": 4,
        "lambda_rec": 1.0,
        "lambda_reg": 0.01,
        "epochs": 4,
        "batch_size": 16,
        "lr": 2e-3,
        "checkpoint": None,
    },
    "generator": {
        "variant": "equivariant",
        "n_layers": 4,
        "hidden_dim": 64,
        "n_heads": 4,
        "window_w": 3,
        "rotary_base": 10000.0,
        "cond_seq_len": 16,
        "mlp_ratio": 4,
        "attn_dropout": 0.0,
        "proj_dropout": 0.0,
        "cond_dropout": 0.1,
        "cross_pe": True,
        "shift_max": 112,
        "max_seq_len": 17,
        "seed": 0,
        "flow_head": {"mlp_layers": 3, "mlp_hidden": 128, "t_embed_dim": 64},
    },
    "train": {
        "epochs": 30,
        "batch_size": 64,
        "base_lr": 3e-4,
        "warmup_epochs": 3,
        "weight_decay": 0.02,
        "grad_clip": 3.0,
        "seed": 0,
        "task_mask": None,
        "ema_decay": 0.9999,
    },
    "sampler": {
        "n_steps": 100,
        "cfg_start": 1.0,
        "cfg_end": 1.0,
        "target_len": 16,
        "seed": 0,
        "temperature": 1.0,
        "n_samples": 16,
    },
    "analysis": {
        "eval_seed": 0,
        "stationarity_batch": 64,
        "stationarity_target_len": 128,
        "dist_samples": 64,
        "feature_dim": 64,
        "transfer": {"baseline_log": None, "early_epoch": 2, "single_logs": {}},
    },
    "service": {
        "host": "127.0.0.1",
        "port": 8700,
        "max_sessions": 64,
        "session_ttl_s": 1800.0,
        "max_len_multiplier": 16,
    },
}


def _num(extra: dict | None = None) -> dict:
    return {"type": "number", **(extra or {})}


def _int(extra: dict | None = None) -> dict:
    return {"type": "integer", **(extra or {})}


_MASK_SCHEMA = {
    "oneOf": [
        {"type": "null"},
        {"type": "string"},
        {"type": "array", "items": _int()},
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["shift_invariant_texture", "center_biased_blobs"]},
                "image_h": _int({"minimum": 4}),
                "image_w": _int({"minimum": 4}),
                "n_classes": _int({"minimum": 1}),
                "train_size": _int({"minimum": 1}),
                "eval_size": _int({"minimum": 1}),
                "seed": _int(),
                "augment": {"type": "boolean"},
            },
        },
        "tokenizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["linear", "conv"]},
                "n_tokens": _int({"minimum": 1}),
                "token_channels": _int({"minimum": 1}),
                "seed": _int(),
                "exact": {"type": "boolean"},
                "latent_channels": _int({"minimum": 1}),
                "base_channels": _int({"minimum": 1}),
                "downsample_f": _int({"minimum": 1}),
                "lambda_rec": _num({"minimum": 0}),
                "lambda_reg": _num({"minimum": 0}),
                "epochs": _int({"minimum": 1}),
                "batch_size": _int({"minimum": 1}),
                "lr": _num({"exclusiveMinimum": 0}),
                "checkpoint": {"oneOf": [{"type": "null"}, {"type": "string"}]},
            },
        },
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variant": {"enum": ["equivariant", "baseline_2d", "real_equivariant"]},
                "n_layers": _int({"minimum": 1}),
                "hidden_dim": _int({"minimum": 2}),
                "n_heads": _int({"minimum": 1}),
                "window_w": _int({"minimum": 0}),
                "rotary_base": _num({"exclusiveMinimum": 0}),
                "cond_seq_len": _int({"minimum": 1}),
                "mlp_ratio": _int({"minimum": 1}),
                "attn_dropout": _num({"minimum": 0, "maximum": 1}),
                "proj_dropout": _num({"minimum": 0, "maximum": 1}),
                "cond_dropout": _num({"minimum": 0, "maximum": 1}),
                "cross_pe": {"type": "boolean"},
                "shift_max": _int({"minimum": 0}),
                "max_seq_len": _int({"minimum": 2}),
                "seed": _int(),
                "flow_head": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "mlp_layers": _int({"minimum": 1}),
                        "mlp_hidden": _int({"minimum": 1}),
                        "t_embed_dim": _int({"minimum": 2}),
                    },
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _int({"minimum": 1}),
                "batch_size": _int({"minimum": 1}),
                "base_lr": _num({"exclusiveMinimum": 0}),
                "warmup_epochs": _int({"minimum": 0}),
                "weight_decay": _num({"minimum": 0}),
                "grad_clip": _num({"exclusiveMinimum": 0}),
                "seed": _int(),
                "task_mask": _MASK_SCHEMA,
                "ema_decay": _num({"minimum": 0, "exclusiveMaximum": 1}),
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_steps": _int({"minimum": 1}),
                "cfg_start": _num(),
                "cfg_end": _num(),
                "target_len": _int({"minimum": 1}),
                "seed": _int(),
                "temperature": _num({"exclusiveMinimum": 0}),
                "n_samples": _int({"minimum": 1}),
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eval_seed": _int(),
                "stationarity_batch": _int({"minimum": 32}),
                "stationarity_target_len": _int({"minimum": 1}),
                "dist_samples": _int({"minimum": 2}),
                "feature_dim": _int({"minimum": 1}),
                "transfer": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "baseline_log": {"oneOf": [{"type": "null"}, {"type": "string"}]},
                        "early_epoch": _int({"minimum": 0}),
                        "single_logs": {
                            "type": "object",
                            "additionalProperties": {"type": "string"},
                        },
                    },
                },
            },
        },
        "service": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "host": {"type": "string"},
                "port": _int({"minimum": 1, "maximum": 65535}),
                "max_sessions": _int({"minimum": 1}),
                "session_ttl_s": _num({"exclusiveMinimum": 0}),
                "max_len_multiplier": _int({"minimum": 1}),
            },
        },
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(message)
        self.pointer = pointer


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in overlay.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Dotted-path assignments, e.g. train.epochs=30 or data.kind=...";
    values parse as JSON when possible, else stay strings."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object", "/" + "/".join(keys))
        node[keys[-1]] = _parse_override_value(raw)
    return out


def validate(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(err.message, pointer)


def resolve(config_path: str | None, overrides: list[str] | None = None) -> dict:
    """defaults <- file <- overrides, then strict validation."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        with open(config_path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object", "/")
        cfg = _deep_merge(cfg, user)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def parse_mask(mask, n_positions: int) -> list[int] | None:
    """None, "0-7", "0-3,8,11", or an int list -> sorted unique positions."""
    if mask is None:
        return None
    if isinstance(mask, list):
        out = sorted(set(int(x) for x in mask))
    else:
        out = set()
        for part in str(mask).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.update(range(int(lo), int(hi) + 1))
            else:
                out.add(int(part))
        out = sorted(out)
    if not out:
        raise ConfigError("task mask resolves to the empty set", "/train/task_mask")
    bad = [p for p in out if p < 0 or p >= n_positions]
    if bad:
        raise ConfigError(f"mask positions {bad} outside [0, {n_positions})", "/train/task_mask")
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:8]
