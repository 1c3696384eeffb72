"""Run configuration: JSON schema, validation, and seed-stream derivation.

A run config is a JSON object with four sections (all fields optional,
defaults below):

    {
      "seed": 0, "variant": "full", "threshold": 0.5,
      "model":     {"d", "k", "d_h", "L", "k_tokens"},
      "features":  {"patch_size", "channels", "mel_bins", "text_vocab",
                    "max_visual_tokens", "max_acoustic_tokens", "max_text_tokens"},
      "optimizer": {"lr", "beta1", "beta2", "epochs", "batch_size"}
    }

Every artifact's randomness flows from the single seed through fixed
streams: (seed, 0, split, index) sample content, (seed, 1, class) planted
patterns, (seed, 2) parameter init, (seed, 3, epoch) batch shuffling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import FeatureGeometry
from .numerics import ValidationError
from .pooling import VARIANTS, ModelConfig

STREAM_SAMPLES = 0
STREAM_PATTERNS = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3


def seed_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *stream)))


@dataclass(frozen=True)
class ModelSection:
    d: int = 768
    k: int = 12
    d_h: int = 64
    L: int = 12
    k_tokens: int = 256


@dataclass(frozen=True)
class FeatureSection:
    patch_size: int = 16
    channels: int = 3
    mel_bins: int = 128
    text_vocab: int = 1000
    max_visual_tokens: int = 576
    max_acoustic_tokens: int = 512
    max_text_tokens: int = 300


@dataclass(frozen=True)
class OptimizerSection:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 40
    batch_size: int = 8


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = "full"
    threshold: float = 0.5
    model: ModelSection = field(default_factory=ModelSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)

    def __post_init__(self):
        self.model_config()  # runs every cross-field shape check
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie in (0,1), got {self.threshold}")
        opt = self.optimizer
        if opt.lr <= 0 or not (0 <= opt.beta1 < 1) or not (0 <= opt.beta2 < 1):
            raise ValidationError("optimizer needs lr > 0 and betas in [0,1)")
        if opt.epochs < 0 or opt.batch_size < 1:
            raise ValidationError("optimizer needs epochs >= 0 and batch_size >= 1")

    def model_config(self) -> ModelConfig:
        m, f = self.model, self.features
        return ModelConfig(
            d=m.d, k=m.k, d_h=m.d_h, L=m.L, k_tokens=m.k_tokens,
            n_classes=2,  # placeholder; the dataset supplies the real class count
            variant=self.variant,
            max_visual_tokens=f.max_visual_tokens,
            max_acoustic_tokens=f.max_acoustic_tokens,
            max_text_tokens=f.max_text_tokens,
        )

    def model_config_for(self, n_classes: int) -> ModelConfig:
        m, f = self.model, self.features
        return ModelConfig(
            d=m.d, k=m.k, d_h=m.d_h, L=m.L, k_tokens=m.k_tokens,
            n_classes=n_classes, variant=self.variant,
            max_visual_tokens=f.max_visual_tokens,
            max_acoustic_tokens=f.max_acoustic_tokens,
            max_text_tokens=f.max_text_tokens,
        )

    def geometry(self) -> FeatureGeometry:
        f = self.features
        return FeatureGeometry(patch_size=f.patch_size, channels=f.channels,
                               mel_bins=f.mel_bins, text_vocab=f.text_vocab)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "RunConfig":
        sections = {"model": ModelSection, "features": FeatureSection, "optimizer": OptimizerSection}
        top_known = {"seed", "variant", "threshold", *sections}
        unknown = set(payload) - top_known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        for key in ("seed", "variant", "threshold"):
            if key in payload:
                kwargs[key] = payload[key]
        for name, section_cls in sections.items():
            body = payload.get(name, {})
            known = set(section_cls.__dataclass_fields__)
            bad = set(body) - known
            if bad:
                raise ValidationError(f"unknown {name} config fields: {sorted(bad)}")
            kwargs[name] = section_cls(**body)
        if kwargs.get("variant", "full") not in VARIANTS:
            raise ValidationError(f"unknown variant {kwargs['variant']!r}; expected one of {VARIANTS}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ValidationError(f"config {path} must hold a JSON object")
        return cls.from_json(payload)
