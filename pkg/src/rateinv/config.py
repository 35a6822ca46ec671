"""Experiment configuration: one JSON file drives the whole pipeline.

The schema is validated up front with field-precise errors and unknown keys
are rejected, so a typo fails before any stage runs. System presets pick the
branch architecture, active loss terms, and training data; explicit lambda
values in the loss section override the preset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable

from .errors import ConfigError
from .trainer import SYSTEM_PRESETS

PROTOCOLS = ("sweep", "three-rate")
BACKENDS = ("plda", "cosine")


@dataclass(frozen=True)
class _Field:
    type: type
    default: Any
    check: Callable[[Any], bool] | None = None
    describe: str = ""


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


_SCHEMA: dict[str, Any] = {
    "seed": _Field(int, 0, _non_negative, ">= 0"),
    "workdir": _Field(str, "work"),
    "system": _Field(str, "fd-al", lambda v: v in SYSTEM_PRESETS,
                     f"one of {sorted(SYSTEM_PRESETS)}"),
    "corpus": {
        "root": _Field(str, "corpus"),
        "n_speakers": _Field(int, 24, lambda v: v >= 3, ">= 3"),
        "test_speakers": _Field(int, 8, _positive, "> 0"),
        "utts_per_speaker": _Field(int, 8, _positive, "> 0"),
        "duration_lo": _Field(float, 2.8, lambda v: 0.5 <= v <= 10, "in [0.5, 10]"),
        "duration_hi": _Field(float, 3.6, lambda v: 0.5 <= v <= 10, "in [0.5, 10]"),
        "syllable_lo": _Field(float, 2.5, lambda v: 1 <= v <= 10, "in [1, 10]"),
        "syllable_hi": _Field(float, 5.0, lambda v: 1 <= v <= 10, "in [1, 10]"),
    },
    "tsm": {
        "frame_length": _Field(int, 1024, lambda v: v >= 2, ">= 2"),
        "synthesis_hop": _Field(int, 256, _positive, "> 0"),
        "search_tolerance": _Field(int, 256, _non_negative, ">= 0"),
        "plan": _Field(object, "voxceleb"),
        "plan_seed": _Field(int, 0, _non_negative, ">= 0"),
    },
    "features": {
        "vad_mean_offset": _Field(float, -1.5),
        "vad_energy_floor": _Field(float, -10.0),
        "cmn_window": _Field(int, 300, _positive, "> 0"),
    },
    "model": {
        "channels": _Field(int, 64, _positive, "> 0"),
        "embed_dim": _Field(int, 128, _positive, "> 0"),
        "map_dim": _Field(int, 64, _positive, "> 0"),
        "bottleneck_ratio": _Field(int, 4, _positive, "> 0"),
    },
    "loss": {
        "lambda1": _Field(object, None),
        "lambda2": _Field(object, None),
        "am_scale": _Field(float, 30.0, _positive, "> 0"),
        "am_margin": _Field(float, 0.2, lambda v: 0 <= v < 1, "in [0, 1)"),
        "epsilon": _Field(float, 1e-8, _positive, "> 0"),
    },
    "trainer": {
        "steps": _Field(int, 420, _positive, "> 0"),
        "batch_size": _Field(int, 32, _positive, "> 0"),
        "chunk_frames": _Field(int, 200, _positive, "> 0"),
        "learning_rate": _Field(float, 0.01, _non_negative, ">= 0"),
        "momentum": _Field(float, 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
        "max_phase_iters": _Field(int, 20, _positive, "> 0"),
        "min_phase_iters": _Field(int, 50, _positive, "> 0"),
        "min_frames": _Field(int, 20, _positive, "> 0"),
        "monitor_batch_size": _Field(int, 24, _positive, "> 0"),
    },
    "eval": {
        "protocol": _Field(str, "sweep", lambda v: v in PROTOCOLS, f"one of {PROTOCOLS}"),
        "test_alphas": _Field(list, [0.5, 1.0, 2.0]),
        "enroll_rate": _Field(str, "normal"),
        "backend": _Field(str, "plda", lambda v: v in BACKENDS, f"one of {BACKENDS}"),
        "plda_iters": _Field(int, 10, _positive, "> 0"),
        "length_norm": _Field(bool, True),
    },
}

_NUMERIC = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,)}


def _check_field(path: str, field: _Field, value):
    if field.type is object:
        pass
    elif field.type is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    elif not isinstance(value, _NUMERIC[field.type]):
        raise ConfigError(f"{path}: expected {field.type.__name__}, got {type(value).__name__}")
    if field.type is float:
        value = float(value)
    if field.check is not None and not field.check(value):
        raise ConfigError(f"{path}: value {value!r} must be {field.describe}")
    return value


def _validate_section(raw: dict, schema: dict, prefix: str) -> dict:
    out = {}
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"{path}: unknown key")
        node = schema[key]
        if isinstance(node, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            out[key] = _validate_section(value, node, path + ".")
        else:
            out[key] = _check_field(path, node, value)
    for key, node in schema.items():
        if key in out:
            continue
        if isinstance(node, dict):
            out[key] = _validate_section({}, node, f"{prefix}{key}.")
        else:
            out[key] = node.default
    return out


def _validate_plan(plan, path="tsm.plan"):
    if plan == "voxceleb":
        return plan
    if not isinstance(plan, list) or not plan:
        raise ConfigError(f"{path}: expected 'voxceleb' or a non-empty list of [alpha, fraction]")
    entries = []
    for i, entry in enumerate(plan):
        if not (isinstance(entry, list) and len(entry) == 2):
            raise ConfigError(f"{path}[{i}]: expected [alpha, fraction]")
        alpha, fraction = entry
        if not isinstance(alpha, (int, float)) or not isinstance(fraction, (int, float)):
            raise ConfigError(f"{path}[{i}]: alpha and fraction must be numbers")
        entries.append((float(alpha), float(fraction)))
    return entries


def validate_config(raw: dict) -> dict:
    """Validate a raw config dict; fill defaults; reject unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _validate_section(raw, _SCHEMA, "")
    cfg["tsm"]["plan"] = _validate_plan(cfg["tsm"]["plan"])
    for name in ("lambda1", "lambda2"):
        v = cfg["loss"][name]
        if v is not None:
            if not isinstance(v, (int, float)) or v < 0:
                raise ConfigError(f"loss.{name}: must be a non-negative number or null")
            cfg["loss"][name] = float(v)
    alphas = cfg["eval"]["test_alphas"]
    for i, a in enumerate(alphas):
        if not isinstance(a, (int, float)) or not 0.5 <= a <= 2.0:
            raise ConfigError(f"eval.test_alphas[{i}]: must be a number in [0.5, 2.0]")
    if cfg["eval"]["protocol"] == "three-rate":
        if not any(a < 1.0 for a in alphas) or not any(a > 1.0 for a in alphas):
            raise ConfigError(
                "eval.test_alphas: the three-rate protocol needs at least one "
                "alpha below 1.0 and one above 1.0"
            )
    if cfg["eval"]["enroll_rate"] not in ("slow", "normal", "fast"):
        raise ConfigError("eval.enroll_rate: must be slow, normal, or fast")
    if cfg["corpus"]["duration_lo"] > cfg["corpus"]["duration_hi"]:
        raise ConfigError("corpus.duration_lo must not exceed corpus.duration_hi")
    if cfg["corpus"]["syllable_lo"] > cfg["corpus"]["syllable_hi"]:
        raise ConfigError("corpus.syllable_lo must not exceed corpus.syllable_hi")
    if cfg["corpus"]["test_speakers"] >= cfg["corpus"]["n_speakers"] - 1:
        raise ConfigError(
            "corpus.test_speakers must leave at least 2 training speakers"
        )
    if cfg["model"]["embed_dim"] % cfg["model"]["bottleneck_ratio"] != 0:
        raise ConfigError("model.embed_dim must be divisible by model.bottleneck_ratio")
    return cfg


def load_config(path) -> dict:
    """Read and validate a JSON experiment config."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    return validate_config(raw)


def resolved_system(cfg: dict) -> dict:
    """Merge the system preset with any explicit lambda overrides."""
    preset = dict(SYSTEM_PRESETS[cfg["system"]])
    if cfg["loss"]["lambda1"] is not None:
        preset["lambda1"] = cfg["loss"]["lambda1"]
    if cfg["loss"]["lambda2"] is not None:
        preset["lambda2"] = cfg["loss"]["lambda2"]
    return preset


def default_config(**overrides) -> dict:
    """A fully-populated config dict (handy starting point for experiments)."""
    cfg = validate_config({})
    cfg.update(overrides)
    return validate_config(cfg)
