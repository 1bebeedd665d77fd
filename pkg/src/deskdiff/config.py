"""Experiment configuration: dataclasses, JSON round-trip, presets.

Two backends ship as presets: ``shapes16`` (16x16 RGB renders of seven object
categories, linear autoencoder, the full attack protocol) and ``gauss2d``
(2-vector mixture data, identity autoencoder, used to verify the diffusion
core against closed-form expectations).

``paper_scale_attack_hypers`` records the full-scale hyperparameters the
desk-scale defaults were shrunk from; they are documentation, not something
this model size can use directly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

SHAPES_CATEGORIES = ["dog", "car", "can", "fridge", "backpack", "clock", "bowl"]
DEFAULT_TEMPLATES = ["a photo of a {} on a road", "a photo of a {} on a beach"]


@dataclass
class ScheduleConfig:
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05


@dataclass
class AutoencoderConfig:
    mode: str = "linear"  # "linear" | "identity"
    latent_width: int = 64
    steps: int = 4000
    batch: int = 64
    lr: float = 1e-3
    max_recon_error: float = 0.05


@dataclass
class BaseTrainConfig:
    steps: int = 6000
    batch: int = 32
    lr: float = 1e-3
    cond_dropout: float = 0.1
    freeze_autoencoder: bool = True
    fidelity_threshold: float = 0.9
    fidelity_samples: int = 100


@dataclass
class AttackHyper:
    lr: float
    steps: int
    batch: int
    lambda_prior: float = 1.0
    prior_images: int = 32
    ti_train_full_text_encoder: bool = False


@dataclass
class AttackPresetConfig:
    """A named, fully specified attack, runnable as `personalize --attack NAME`."""

    name: str
    method: str  # "ti" | "db"
    identifier: str
    target_category: str
    target_instance: str
    k_mismatch: int = 6
    total_images: int = 6
    fuse_identifier: bool = False


@dataclass
class EvalConfig:
    n_images: int = 100
    oracle_hidden: int = 96
    oracle_steps: int = 1500
    oracle_batch: int = 64
    oracle_lr: float = 1e-3
    oracle_min_accuracy: float = 0.98
    oracle_noise_sigma: float = 0.03
    holdout_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    backend: str = "shapes16"
    seed: int = 0
    categories: list[str] = field(default_factory=lambda: list(SHAPES_CATEGORIES))
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    corpus_per_category: int = 200
    guidance_scale: float = 1.0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    base_train: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    ti: AttackHyper = field(default_factory=lambda: AttackHyper(lr=1e-2, steps=400, batch=4))
    db: AttackHyper = field(default_factory=lambda: AttackHyper(lr=3e-4, steps=250, batch=8))
    attacks: list[AttackPresetConfig] = field(
        default_factory=lambda: [
            AttackPresetConfig(
                name="ti-newold-can",
                method="ti",
                identifier="[V] dog",
                target_category="can",
                target_instance="target-can-7",
            ),
            AttackPresetConfig(
                name="db-newold-dog",
                method="db",
                identifier="[V] car",
                target_category="dog",
                target_instance="target-dog-3",
            ),
            AttackPresetConfig(
                name="ti-oldold-dog",
                method="ti",
                identifier="beautiful car",
                target_category="dog",
                target_instance="target-dog-3",
                fuse_identifier=True,
            ),
        ]
    )
    eval: EvalConfig = field(default_factory=EvalConfig)
    # gauss2d backend only: per-category mixture means and shared sigma
    gauss2d_means: dict[str, list[float]] = field(
        default_factory=lambda: {"dog": [-2.0, 0.0], "car": [2.0, 0.0]}
    )
    gauss2d_sigma: float = 0.3

    def validate(self) -> None:
        if self.backend not in ("shapes16", "gauss2d"):
            raise ConfigError(f"unknown backend: {self.backend!r}")
        if not self.categories:
            raise ConfigError("categories must be non-empty")
        if self.backend == "gauss2d":
            missing = [c for c in self.categories if c not in self.gauss2d_means]
            if missing:
                raise ConfigError(f"categories without mixture means: {missing}")
        for template in self.templates:
            if "{}" not in template:
                raise ConfigError(f"template lacks placeholder: {template!r}")
        if self.autoencoder.mode not in ("linear", "identity"):
            raise ConfigError(f"unknown autoencoder mode: {self.autoencoder.mode!r}")
        seen = set()
        for preset in self.attacks:
            if preset.method not in ("ti", "db"):
                raise ConfigError(f"attack preset {preset.name!r}: unknown method {preset.method!r}")
            if preset.name in seen:
                raise ConfigError(f"duplicate attack preset name: {preset.name!r}")
            seen.add(preset.name)
            if preset.target_category not in self.categories:
                raise ConfigError(
                    f"attack preset {preset.name!r}: unknown target category "
                    f"{preset.target_category!r}"
                )
            if not 0 <= preset.k_mismatch <= preset.total_images:
                raise ConfigError(
                    f"attack preset {preset.name!r}: k_mismatch outside [0, total_images]"
                )
        if not (0 < self.schedule.beta_start <= self.schedule.beta_end < 1):
            raise ConfigError("schedule betas must satisfy 0 < start <= end < 1")
        if self.seed is None:
            raise ConfigError("an explicit seed is required")


def shapes16_config(seed: int = 0) -> ExperimentConfig:
    cfg = ExperimentConfig(backend="shapes16", seed=seed, guidance_scale=3.0)
    return cfg


def gauss2d_config(seed: int = 0) -> ExperimentConfig:
    cfg = ExperimentConfig(
        backend="gauss2d",
        seed=seed,
        categories=["dog", "car"],
        templates=["a photo of a {}"],
        autoencoder=AutoencoderConfig(mode="identity", latent_width=2),
        schedule=ScheduleConfig(steps=100, beta_start=1e-4, beta_end=0.1),
        base_train=BaseTrainConfig(steps=3000, batch=64, cond_dropout=0.0, fidelity_threshold=0.0),
        guidance_scale=1.0,
        attacks=[],
    )
    return cfg


def paper_scale_attack_hypers() -> dict[str, AttackHyper]:
    """Full-scale reference hyperparameters (documentation preset)."""
    return {
        "ti": AttackHyper(lr=5e-4, steps=2000, batch=4),
        "db": AttackHyper(lr=5e-6, steps=300, batch=2),
    }


def to_json_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_json_dict(data: dict) -> ExperimentConfig:
    payload = dict(data)
    for name, cls in (
        ("schedule", ScheduleConfig),
        ("autoencoder", AutoencoderConfig),
        ("base_train", BaseTrainConfig),
        ("ti", AttackHyper),
        ("db", AttackHyper),
        ("eval", EvalConfig),
    ):
        if name in payload and isinstance(payload[name], dict):
            payload[name] = cls(**payload[name])
    if "attacks" in payload:
        payload["attacks"] = [
            AttackPresetConfig(**p) if isinstance(p, dict) else p for p in payload["attacks"]
        ]
    cfg = ExperimentConfig(**payload)
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return from_json_dict(data)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(to_json_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
