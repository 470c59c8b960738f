"""Flat key/value experiment configuration.

Config files are single flat JSON objects; every key is optional and
falls back to a documented default. Unknown keys are rejected.
Environment variables named ``FLIC_<KEY>`` (uppercased) override file
values; command-line flags override both. ``serialize_config`` followed
by ``parse_config`` is the identity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .datagen import ToyDatasetSpec
from .federation import RoundConfig
from .theory import TheoryConfig

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "serialize_config"]

ENV_PREFIX = "FLIC_"

MODES = ("flic", "local", "theory")
VARIANTS = ("nf", "lm")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    mode: str = "flic"
    seed: int = 0
    out_dir: str = "out"
    workers: int = 1

    # dataset (either a pre-generated directory or an inline toy spec)
    dataset_path: str | None = None
    variant: str = "lm"
    n_classes: int = 20
    samples_per_class: int = 2000
    base_dim: int = 5
    clients: int = 100
    classes_per_client: int = 3
    noise_dim_min: int = 1
    noise_dim_max: int = 10
    map_dim_min: int = 5
    map_dim_max: int = 50
    imbalance_min: float = 0.1
    imbalance_max: float = 1.0
    mean_scale: float = 2.0
    test_fraction: float = 0.2

    # federated round schedule and losses
    rounds: int = 50
    participation: float = 0.1
    local_steps: int = 10
    batch_size: int = 100
    lr: float = 0.001
    lambda1: float = 0.001
    lambda2: float = 0.001
    anchor_samples: int = 100
    eps: float = 1e-6
    alpha_epoch: bool = False
    final_local_rounds: int = 0
    onboard_rounds: int | None = None

    # model and anchors
    latent_dim: int = 64
    hidden_dim: int = 64
    cov_learnable: bool = False
    anchor_init_scale: float | None = None

    # theory harness
    theory_clients: int = 20
    theory_samples: int = 500
    theory_test_samples: int = 200
    theory_latent_dim: int = 5
    theory_head_dim: int = 3
    theory_raw_dim_min: int = 8
    theory_raw_dim_max: int = 16
    theory_participation: float = 1.0
    theory_rounds: int = 100
    theory_step_size: float = 0.05

    def round_config(self) -> RoundConfig:
        return RoundConfig(
            rounds=self.rounds,
            participation=self.participation,
            local_steps=self.local_steps,
            batch_size=self.batch_size,
            lr=self.lr,
            lam1=self.lambda1,
            lam2=self.lambda2,
            anchor_samples=self.anchor_samples,
            eps=self.eps,
            seed=self.seed,
            alpha_epoch=self.alpha_epoch,
            final_local_rounds=self.final_local_rounds,
        )

    def dataset_spec(self) -> ToyDatasetSpec:
        return ToyDatasetSpec(
            variant=self.variant,
            n_classes=self.n_classes,
            samples_per_class=self.samples_per_class,
            base_dim=self.base_dim,
            clients=self.clients,
            classes_per_client=self.classes_per_client,
            noise_dim_range=(self.noise_dim_min, self.noise_dim_max),
            map_dim_range=(self.map_dim_min, self.map_dim_max),
            imbalance_range=(self.imbalance_min, self.imbalance_max),
            mean_scale=self.mean_scale,
            test_fraction=self.test_fraction,
            seed=self.seed,
        )

    def theory_config(self) -> TheoryConfig:
        return TheoryConfig(
            clients=self.theory_clients,
            samples_per_client=self.theory_samples,
            test_samples=self.theory_test_samples,
            latent_dim=self.theory_latent_dim,
            head_dim=self.theory_head_dim,
            raw_dim_range=(self.theory_raw_dim_min, self.theory_raw_dim_max),
            participation=self.theory_participation,
            rounds=self.theory_rounds,
            step_size=self.theory_step_size,
            seed=self.seed,
        )


_OPTIONAL = {"dataset_path": str, "anchor_init_scale": float, "onboard_rounds": int}


def _coerce(key: str, value, target_type):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type")


def _coerce_env(key: str, raw: str, target_type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: cannot parse boolean from {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def _field_types() -> dict[str, type]:
    out = {}
    for f in fields(ExperimentConfig):
        if f.name in _OPTIONAL:
            out[f.name] = _OPTIONAL[f.name]
        else:
            out[f.name] = type(getattr(ExperimentConfig(), f.name))
    return out


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}")

    if cfg.mode not in MODES:
        fail("mode", f"must be one of {MODES}")
    if cfg.variant not in VARIANTS:
        fail("variant", f"must be one of {VARIANTS}")
    if cfg.workers < 1:
        fail("workers", "must be >= 1")
    if not 0 < cfg.participation <= 1:
        fail("participation", "must lie in (0, 1]")
    if cfg.rounds < 0:
        fail("rounds", "must be >= 0")
    if cfg.local_steps < 1:
        fail("local_steps", "must be >= 1")
    if cfg.batch_size < 1:
        fail("batch_size", "must be >= 1")
    if cfg.anchor_samples < 1:
        fail("anchor_samples", "must be >= 1")
    if cfg.lambda1 < 0 or cfg.lambda2 < 0:
        fail("lambda1", "regularization weights must be >= 0")
    if cfg.eps <= 0:
        fail("eps", "must be > 0")
    if cfg.lr < 0:
        fail("lr", "must be >= 0")
    if cfg.latent_dim < 1 or cfg.hidden_dim < 1:
        fail("latent_dim", "model dimensions must be >= 1")
    if cfg.final_local_rounds < 0:
        fail("final_local_rounds", "must be >= 0")
    if cfg.onboard_rounds is not None and cfg.onboard_rounds < 0:
        fail("onboard_rounds", "must be >= 0")
    if cfg.mode != "theory":
        try:
            cfg.dataset_spec()
        except ValueError as exc:
            raise ConfigError(f"dataset spec: {exc}") from exc
    else:
        try:
            cfg.theory_config()
        except ValueError as exc:
            raise ConfigError(f"theory config: {exc}") from exc
    return cfg


def build_config(values: dict, apply_env: bool = True) -> ExperimentConfig:
    """Validate a flat dict of overrides against the documented keys."""
    types = _field_types()
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {}
    for key, value in values.items():
        if value is None and key in _OPTIONAL:
            merged[key] = None
        else:
            merged[key] = _coerce(key, value, types[key])
    if apply_env:
        for key, target_type in types.items():
            raw = os.environ.get(ENV_PREFIX + key.upper())
            if raw is not None:
                merged[key] = _coerce_env(key, raw, target_type)
    return _validate(ExperimentConfig(**merged))


def parse_config(path, apply_env: bool = True) -> ExperimentConfig:
    """Load a config file; an empty file means all defaults."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text().strip()
    if not text:
        values = {}
    else:
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config must be a flat JSON object")
    return build_config(values, apply_env=apply_env)


def serialize_config(cfg: ExperimentConfig) -> str:
    doc = {f.name: getattr(cfg, f.name) for f in fields(ExperimentConfig)}
    return json.dumps(doc, indent=2, sort_keys=True)
