"""Experiment config files: JSON schema, strict validation, canonical hash.

Unknown keys are hard errors (with their full key path) so a typo'd
hyperparameter can never silently fall back to a default.  The hash is taken
over the fully resolved config (defaults applied, keys sorted), so it is
independent of formatting and of whether a default was spelled out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .distill import STRATEGIES, DistillConfig, SemiSupConfig
from .errors import ConfigError, SchemaVersionError
from .losses import KL_DIRECTIONS
from .models import ARCH_SPECS, PROJECTOR_VARIANTS
from .reprogram import ReprogramConfig
from .utils import canonical_json, sha256_hex

CONFIG_SCHEMA_VERSION = 1

_LOSS_SCHEMA = {
    "temperature": float, "kd_weight": float, "ce_weight": float,
    "mmd_weight": float, "kl_direction": str,
}

# key -> type, for every nested section
_SCHEMA: dict = {
    "schema_version": int,
    "broad_data": str,
    "target_data": str,
    "teacher_checkpoint": str,
    "output_dir": str,
    "student_arch": str,
    "projector": str,
    "strategies": list,
    "seeds": list,
    "deterministic": bool,
    "measure_gap": bool,
    "mmd_penalty": bool,
    "reprogram": {
        "epochs": int, "lr": float, "momentum": float, "weight_decay": float,
        "batch_size": int, "schedule": str, "mmd_subset_size": int,
        "loss": _LOSS_SCHEMA,
    },
    "distill": {
        "total_epochs": int, "phase_split": float, "lr": float,
        "momentum": float, "weight_decay": float, "batch_size": int,
        "schedule": str, "loss": _LOSS_SCHEMA,
    },
    "semisup": {"labeled_fraction": float, "use_unlabeled": bool},
}


def default_config_dict() -> dict:
    """Desk-scale defaults: every knob spelled out."""
    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "broad_data": "data/broad",
        "target_data": "data/target",
        "teacher_checkpoint": "ckpt/teacher_extractor",
        "output_dir": "",
        "student_arch": "cnn_small",
        "projector": "teacher-block",
        "strategies": ["normal", "proxy_transfer", "proxy_copy", "progressive"],
        "seeds": [0, 1, 2, 3, 4],
        "deterministic": True,
        "measure_gap": True,
        "mmd_penalty": True,
        "reprogram": {
            "epochs": 60, "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4,
            "batch_size": 64, "schedule": "cosine", "mmd_subset_size": 512,
            "loss": {"temperature": 1.0, "kd_weight": 1.0, "ce_weight": 1.0,
                     "mmd_weight": 0.0, "kl_direction": "student-first"},
        },
        "distill": {
            "total_epochs": 160, "phase_split": 0.5, "lr": 0.01,
            "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 64,
            "schedule": "cosine",
            "loss": {"temperature": 2.0, "kd_weight": 1.0, "ce_weight": 1.0,
                     "mmd_weight": 0.0, "kl_direction": "teacher-first"},
        },
        "semisup": {"labeled_fraction": 0.1, "use_unlabeled": True},
    }


def _validate_section(given: dict, schema: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object, "
                          f"got {type(given).__name__}")
    out = {}
    for key, value in given.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {here!r}")
        want = schema[key]
        if isinstance(want, dict):
            out[key] = _validate_section(value, want, here)
        elif want is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {here!r} must be a number, "
                                  f"got {value!r}")
            out[key] = float(value)
        elif want is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {here!r} must be an integer, "
                                  f"got {value!r}")
            out[key] = value
        elif want is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"config key {here!r} must be a boolean, "
                                  f"got {value!r}")
            out[key] = value
        elif want is str:
            if not isinstance(value, str):
                raise ConfigError(f"config key {here!r} must be a string, "
                                  f"got {value!r}")
            out[key] = value
        elif want is list:
            if not isinstance(value, list):
                raise ConfigError(f"config key {here!r} must be a list, "
                                  f"got {value!r}")
            out[key] = value
        else:  # pragma: no cover - schema authoring error
            raise AssertionError(f"bad schema entry at {here}")
    return out


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def config_hash(resolved: dict) -> str:
    return sha256_hex(canonical_json(resolved).encode("utf-8"))


@dataclass
class ExperimentConfig:
    """Parsed experiment description plus its canonical hash."""

    broad_data: str
    target_data: str
    teacher_checkpoint: str
    output_dir: str
    student_arch: str
    projector: str
    strategies: list[str]
    seeds: list[int]
    deterministic: bool
    measure_gap: bool
    mmd_penalty: bool
    reprogram: ReprogramConfig
    distill: DistillConfig
    semisup: SemiSupConfig
    resolved: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.resolved)

    def for_seed(self, seed: int) -> tuple[ReprogramConfig, DistillConfig]:
        return (replace(self.reprogram, seed=seed),
                replace(self.distill, seed=seed))


def resolve_config(given: dict, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Validate a raw config dict, apply defaults, build the dataclasses."""
    checked = _validate_section(given, _SCHEMA, "")
    version = checked.get("schema_version")
    if version is None:
        raise ConfigError("config is missing required key 'schema_version'")
    if version != CONFIG_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"config schema version {version}, this build reads "
            f"{CONFIG_SCHEMA_VERSION}")
    resolved = _deep_merge(default_config_dict(), checked)

    strategies = resolved["strategies"]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(
                f"config key 'strategies' contains unknown strategy {s!r}; "
                f"expected values from {STRATEGIES}")
    seeds = resolved["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                            for s in seeds):
        raise ConfigError("config key 'seeds' must be a non-empty list of ints")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("config key 'seeds' contains duplicates")
    if resolved["student_arch"] not in ARCH_SPECS:
        raise ConfigError(
            f"config key 'student_arch' is {resolved['student_arch']!r}; "
            f"expected one of {sorted(ARCH_SPECS)}")
    if resolved["projector"] not in PROJECTOR_VARIANTS:
        raise ConfigError(
            f"config key 'projector' is {resolved['projector']!r}; "
            f"expected one of {PROJECTOR_VARIANTS}")
    if resolved["reprogram"]["loss"]["kl_direction"] not in KL_DIRECTIONS:
        raise ConfigError("config key 'reprogram.loss.kl_direction' is invalid")

    try:
        reprogram = ReprogramConfig.from_dict({**resolved["reprogram"], "seed": 0})
        distill = DistillConfig.from_dict({**resolved["distill"], "seed": 0})
        semisup = SemiSupConfig.from_dict(resolved["semisup"])
    except TypeError as e:
        raise ConfigError(f"config has an invalid section: {e}") from e

    def _abspath(p: str) -> str:
        if not p or base_dir is None:
            return p
        q = Path(p)
        return str(q if q.is_absolute() else Path(base_dir) / q)

    return ExperimentConfig(
        broad_data=_abspath(resolved["broad_data"]),
        target_data=_abspath(resolved["target_data"]),
        teacher_checkpoint=_abspath(resolved["teacher_checkpoint"]),
        output_dir=_abspath(resolved["output_dir"]),
        student_arch=resolved["student_arch"],
        projector=resolved["projector"],
        strategies=list(strategies),
        seeds=list(seeds),
        deterministic=resolved["deterministic"],
        measure_gap=resolved["measure_gap"],
        mmd_penalty=resolved["mmd_penalty"],
        reprogram=reprogram,
        distill=distill,
        semisup=semisup,
        resolved=resolved,
    )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        from .errors import MissingArtifactError
        raise MissingArtifactError(f"config file not found: {path}")
    try:
        given = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return resolve_config(given, base_dir=path.parent)


def save_config(config_dict: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_dict, indent=2, sort_keys=True) + "\n")
    return path
