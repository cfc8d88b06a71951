"""Run configuration: defaults, TOML overrides, and provenance metadata.

Precedence is command-line flags over config file over built-in defaults,
resolved per key. Every experiment command can write a RunMetadata JSON
recording the effective configuration, seeds, and encode totals so a run
can be audited or repeated later.
"""
from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import __version__


class ConfigError(ValueError):
    pass


# Modeling conventions that are choices, not measurements. Recorded in run
# metadata so downstream comparisons know what they are comparing against.
ASSUMPTIONS = {
    "global_psnr": "(6*Y + U + V) / 8",
    "k_scope": "one multiplier scales the I, P, and B lambdas together",
    "lambda_injection": "k is passed through the encoder command template; "
    "a build exposing a lambda scale is assumed",
    "bn_placement": "dense -> batch_norm -> gelu -> dropout, including the "
    "output layer unless final_batch_norm is off",
    "clip_block_extras": "clip block carries avg_qp and elapsed_seconds "
    "beyond the per-type rate/psnr aggregates",
    "fps_fallback": 30.0,
    "feature_probe_crf": 33,
    "semantic_frame_index": 75,
    "k_range": [0.2, 3.0],
}

DEFAULTS = {
    "backend": "synthetic",
    "encoder_cmd": "",
    "crf_list": [22, 27, 32, 37, 42],
    "k_min": 0.2,
    "k_max": 3.0,
    "tol": 0.01,
    "max_iters": 40,
    "grid": "0.2:0.05:3.0",
    "seed": 0,
    "jobs": 0,  # 0 = available parallelism
    "fraction": 0.7,
    "epochs": 5000,
    "learning_rate": 0.001,
    "momentum": 0.9,
    "batch_size": 32,
    "target_train_mae": None,
    "stats_format": "canonical",
}


def load_config(path: str | Path) -> dict:
    """Parse a flat TOML config; unknown keys are rejected, not ignored."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = tomllib.loads(raw.decode())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return cfg


def effective_config(
    file_cfg: dict | None = None, flags: dict | None = None
) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags.

    Flag values of None mean "not given on the command line" and never
    shadow the other layers.
    """
    merged = dict(DEFAULTS)
    for key, value in (file_cfg or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        merged[key] = value
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown flag key: {key}")
        merged[key] = value
    return merged


@dataclass
class RunMetadata:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    encodes: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    assumptions: dict = field(default_factory=lambda: dict(ASSUMPTIONS))
    version: str = __version__
    python: str = field(default_factory=platform.python_version)
    started_unix: float = field(default_factory=time.time)

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "encodes": self.encodes,
            "notes": self.notes,
            "assumptions": self.assumptions,
            "version": self.version,
            "python": self.python,
            "started_unix": self.started_unix,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
