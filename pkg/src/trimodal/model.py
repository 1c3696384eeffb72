"""Assembled trainable model: patch/text embeddings + pooled encoders + head.

Works on featurized samples (flattened patches and token ids); the embedding
projections are part of the trainable graph. One `training_step` = mean BCE
over a batch, one backward pass, one Adam step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import pooling
from .featurize import (
    PatchEmbedParams,
    TextEmbedParams,
    VisualInput,
    embed_patches,
    embed_text,
    log_mel_fbank,
    split_image_patches,
    split_spectrogram_patches,
)
from .fusion import Predictions, fuse, metrics, predict_labels
from .numerics import AdamState, Tape, Tensor, ValidationError
from .pooling import CoreParams, ModelConfig, TriModalState


@dataclass(frozen=True)
class FeatureGeometry:
    """Raw-input geometry the embedding layers are sized for."""

    patch_size: int
    channels: int
    mel_bins: int
    text_vocab: int

    @property
    def visual_patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def acoustic_patch_dim(self) -> int:
        return self.mel_bins * 2


@dataclass
class FeaturizedSample:
    visual_patches: np.ndarray  # (Q, P*P*C)
    acoustic_patches: np.ndarray  # (M, F*2)
    text_ids: np.ndarray  # (N_text,)
    label: np.ndarray  # (C,) binary
    planted: dict[str, list[int]] | None = None
    sample_id: str = ""


def featurize_sample(images: np.ndarray, patch_size: int, waveform: np.ndarray,
                     sample_rate: int, text_ids: np.ndarray, label: np.ndarray,
                     mel_bins: int = 128, planted=None, sample_id: str = "") -> FeaturizedSample:
    visual = split_image_patches(VisualInput(images=images, patch_size=patch_size))
    spec = log_mel_fbank(waveform, sample_rate, mel_bins)
    acoustic = split_spectrogram_patches(spec, mode="temporal")
    return FeaturizedSample(
        visual_patches=visual,
        acoustic_patches=acoustic,
        text_ids=np.asarray(text_ids, dtype=np.intp),
        label=np.asarray(label, dtype=np.float64),
        planted=planted,
        sample_id=sample_id,
    )


@dataclass
class TriModalModel:
    cfg: ModelConfig
    geometry: FeatureGeometry
    visual_embed: PatchEmbedParams
    acoustic_embed: PatchEmbedParams
    text_embed: TextEmbedParams
    core: CoreParams

    @classmethod
    def build(cls, cfg: ModelConfig, geometry: FeatureGeometry,
              rng: np.random.Generator, dtype=np.float64) -> "TriModalModel":
        return cls(
            cfg=cfg,
            geometry=geometry,
            visual_embed=PatchEmbedParams.init(
                geometry.visual_patch_dim, cfg.d, rng,
                geometry=f"visual:P={geometry.patch_size},C={geometry.channels}",
                dtype=dtype, prefix="embed_visual"),
            acoustic_embed=PatchEmbedParams.init(
                geometry.acoustic_patch_dim, cfg.d, rng,
                geometry=f"acoustic:F={geometry.mel_bins}x2",
                dtype=dtype, prefix="embed_acoustic"),
            text_embed=TextEmbedParams.init(
                geometry.text_vocab, cfg.max_text_tokens, cfg.d, rng,
                dtype=dtype, prefix="embed_text"),
            core=CoreParams.build(cfg, rng, dtype),
        )

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = list(self.visual_embed.named())
        out += list(self.acoustic_embed.named())
        out += list(self.text_embed.named())
        out += list(self.core.named())
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy checkpoint arrays into the parameters; shapes must match."""
        named = dict(self.named_params())
        if set(named) != set(state):
            missing = sorted(set(named) ^ set(state))
            raise ValidationError(f"checkpoint does not match model parameters: {missing[:4]}")
        for name, tensor in named.items():
            if state[name].shape != tensor.data.shape:
                raise ValidationError(
                    f"checkpoint shape {state[name].shape} for {name} does not match model {tensor.data.shape}")
            tensor.data[:] = state[name].astype(tensor.data.dtype)

    def forward_sample(self, sample: FeaturizedSample) -> tuple[TriModalState, Predictions]:
        visual = embed_patches(sample.visual_patches, self.visual_embed, "visual")
        acoustic = embed_patches(sample.acoustic_patches, self.acoustic_embed, "acoustic")
        textual = embed_text(sample.text_ids, self.text_embed)
        state = pooling.forward(self.core, visual, acoustic, textual)
        preds = fuse(state.v, state.a, state.v_l, self.core.fusion)
        return state, preds


@dataclass
class StepResult:
    loss: float
    pool_flops: int
    forward_flops: int


def training_step(batch: list[FeaturizedSample], model: TriModalModel, opt: AdamState,
                  lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                  dtype=np.float64) -> StepResult:
    """Mean BCE over the batch, one backward pass, one Adam update."""
    if not batch:
        raise ValidationError("training_step needs a non-empty batch")
    params = model.params()
    nm.zero_grads(params)
    with Tape(dtype) as tape:
        total = None
        pool_flops = 0
        for sample in batch:
            state, preds = model.forward_sample(sample)
            pool_flops += state.pool_flops
            loss = nm.bce_with_logits(preds.p, sample.label)
            total = loss if total is None else nm.add(total, loss)
        mean_loss = nm.scale(total, 1.0 / len(batch))
        forward_flops = tape.flops
        tape.backward(mean_loss)
    nm.adam_step(params, opt, lr=lr, betas=betas)
    return StepResult(loss=float(mean_loss.data), pool_flops=pool_flops, forward_flops=forward_flops)


def predict_batch(model: TriModalModel, samples: list[FeaturizedSample],
                  threshold: float = 0.5, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Forward every sample; returns (predictions, targets) binary matrices."""
    preds, targets = [], []
    for sample in samples:
        with Tape(dtype):
            _, out = model.forward_sample(sample)
        preds.append(predict_labels(out.p, threshold))
        targets.append(sample.label.astype(np.uint8))
    return np.array(preds), np.array(targets)


def evaluate(model: TriModalModel, samples: list[FeaturizedSample],
             threshold: float = 0.5, dtype=np.float64):
    preds, targets = predict_batch(model, samples, threshold, dtype)
    return metrics(preds, targets)
