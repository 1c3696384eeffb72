"""Deterministic tri-modal synthetic data with planted class signals.

Every positive class plants one localized pattern per modality: a fixed
high-energy texture in a 2x2 block of visual patches (distinct block per
class), an additive tone burst at a class-specific frequency inside a
class-specific time interval, and a fixed 3-token id motif at class-specific
text positions. Planted token/patch indices are recorded so attention mass
over them can be measured after training.

All randomness derives from the spec seed through documented streams:
(seed, 0, split_index, sample_index) for sample content and (seed, 1, class)
for the per-class patterns, so (spec, seed) fully determines every byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .featurize import FBANK_HOP_S, FBANK_WINDOW_S, fbank_frame_count
from .numerics import ValidationError

STREAM_SAMPLES = 0
STREAM_PATTERNS = 1

SPLITS = ("train", "valid", "test")
MOTIF_LEN = 3
NOISE_STD = 0.05
BLOCK = 2  # planted visual block is BLOCK x BLOCK patches


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 4
    train_samples: int = 64
    valid_samples: int = 32
    test_samples: int = 64
    images: int = 4
    height: int = 32
    width: int = 32
    channels: int = 1
    patch: int = 8
    duration_s: float = 2.0
    sample_rate: int = 8000
    text_len: int = 16
    vocab: int = 100
    snr: float = 5.0
    positive_rate: float = 0.35
    seed: int = 0

    def samples_for(self, split: str) -> int:
        return {"train": self.train_samples, "valid": self.valid_samples,
                "test": self.test_samples}[split]

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def n_samples_audio(self) -> int:
        return round(self.duration_s * self.sample_rate)

    def validate(self) -> None:
        if self.classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.classes}")
        if self.snr <= 0:
            raise ValidationError(f"snr must be positive, got {self.snr}")
        if not 0 < self.positive_rate < 1:
            raise ValidationError(f"positive_rate must lie in (0,1), got {self.positive_rate}")
        if self.height % self.patch or self.width % self.patch:
            raise ValidationError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        if len(_visual_slots(self)) < self.classes:
            raise ValidationError(
                f"geometry too small to host planted regions: {len(_visual_slots(self))} "
                f"blocks available for {self.classes} classes")
        if self.text_len // self.classes < MOTIF_LEN:
            raise ValidationError(
                f"text length {self.text_len} too short to host {self.classes} "
                f"motifs of {MOTIF_LEN} tokens")
        if self.vocab < 2:
            raise ValidationError(f"vocabulary must have at least 2 ids, got {self.vocab}")
        if self.sample_rate < 8000:
            raise ValidationError(f"sample_rate must be >= 8000, got {self.sample_rate}")
        if max(_tone_freqs(self)) >= 0.95 * self.sample_rate / 2:
            raise ValidationError("planted tone frequencies exceed the usable band")
        win = round(FBANK_WINDOW_S * self.sample_rate)
        if self.n_samples_audio < 2 * win:
            raise ValidationError(f"audio of {self.duration_s}s too short for planted bursts")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown dataset spec fields: {sorted(unknown)}")
        spec = cls(**payload)
        spec.validate()
        return spec


@dataclass
class SynthSample:
    sample_id: str
    images: np.ndarray  # (J, H, W, C) in [0,1]
    waveform: np.ndarray
    sample_rate: int
    text_ids: np.ndarray
    label: np.ndarray  # (C,) binary, at least one positive
    planted: dict[str, list[int]] = field(default_factory=dict)


def effective_positive_rate(spec: SynthSpec) -> float:
    """Per-class positive marginal after rejecting all-negative labels."""
    p = spec.positive_rate
    return p / (1.0 - (1.0 - p) ** spec.classes)


def _visual_slots(spec: SynthSpec) -> list[tuple[int, int, int]]:
    """(image, block_row, block_col) anchors, spread across images first."""
    slots = []
    for i in range(spec.grid_h // BLOCK):
        for j in range(spec.grid_w // BLOCK):
            for img in range(spec.images):
                slots.append((img, i, j))
    return slots


def _tone_freqs(spec: SynthSpec) -> list[float]:
    nyquist = spec.sample_rate / 2.0
    lo, hi = 300.0, 0.8 * nyquist
    step = (hi - lo) / max(spec.classes - 1, 1)
    return [lo + c * step for c in range(spec.classes)]


def visual_planted_indices(spec: SynthSpec, cls: int) -> list[int]:
    """Patch/token indices covered by a class's planted block (row-major)."""
    img, bi, bj = _visual_slots(spec)[cls]
    base_r, base_c = bi * BLOCK, bj * BLOCK
    out = []
    for dr in range(BLOCK):
        for dc in range(BLOCK):
            out.append(img * spec.grid_h * spec.grid_w + (base_r + dr) * spec.grid_w + (base_c + dc))
    return out


def _burst_interval(spec: SynthSpec, cls: int) -> tuple[float, float]:
    slot = spec.duration_s / spec.classes
    return (cls + 0.2) * slot, (cls + 0.8) * slot


def acoustic_planted_indices(spec: SynthSpec, cls: int) -> list[int]:
    """Temporal patch indices whose frames' centers fall in the burst."""
    start, end = _burst_interval(spec, cls)
    win = round(FBANK_WINDOW_S * spec.sample_rate)
    hop = round(FBANK_HOP_S * spec.sample_rate)
    frames = fbank_frame_count(spec.n_samples_audio, spec.sample_rate)
    centers = (np.arange(frames) * hop + win / 2.0) / spec.sample_rate
    in_burst = (centers >= start) & (centers < end)
    patches = set()
    for i in np.flatnonzero(in_burst):
        if i // 2 < frames // 2:
            patches.add(int(i // 2))
    return sorted(patches)


def text_planted_positions(spec: SynthSpec, cls: int) -> list[int]:
    start = cls * (spec.text_len // spec.classes)
    return list(range(start, start + MOTIF_LEN))


@dataclass
class _ClassPatterns:
    visual: np.ndarray  # (BLOCK*P, BLOCK*P, C) in [0,1]
    motif: np.ndarray  # (MOTIF_LEN,) token ids
    freq: float


def _class_patterns(spec: SynthSpec) -> list[_ClassPatterns]:
    freqs = _tone_freqs(spec)
    out = []
    for cls in range(spec.classes):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, STREAM_PATTERNS, cls)))
        side = BLOCK * spec.patch
        out.append(_ClassPatterns(
            visual=rng.uniform(0.5, 1.0, (side, side, spec.channels)),
            motif=rng.integers(0, spec.vocab, MOTIF_LEN),
            freq=freqs[cls],
        ))
    return out


def _draw_label(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    while True:
        label = (rng.random(spec.classes) < spec.positive_rate).astype(np.float64)
        if label.any():
            return label


def _make_sample(spec: SynthSpec, patterns: list[_ClassPatterns], split: str,
                 split_idx: int, idx: int) -> SynthSample:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, STREAM_SAMPLES, split_idx, idx)))
    label = _draw_label(spec, rng)

    noise_amp = 1.0 / (1.0 + spec.snr)
    images = rng.uniform(0.0, noise_amp, (spec.images, spec.height, spec.width, spec.channels))
    waveform = rng.normal(0.0, NOISE_STD, spec.n_samples_audio)
    text_ids = rng.integers(0, spec.vocab, spec.text_len)

    planted = {"visual": [], "acoustic": [], "textual": []}
    t = np.arange(spec.n_samples_audio) / spec.sample_rate
    for cls in np.flatnonzero(label):
        pat = patterns[cls]
        img, bi, bj = _visual_slots(spec)[cls]
        r0, c0 = bi * BLOCK * spec.patch, bj * BLOCK * spec.patch
        side = BLOCK * spec.patch
        base = images[img, r0 : r0 + side, c0 : c0 + side]
        images[img, r0 : r0 + side, c0 : c0 + side] = base + (1.0 - noise_amp) * pat.visual

        start, end = _burst_interval(spec, cls)
        mask = (t >= start) & (t < end)
        waveform[mask] += spec.snr * NOISE_STD * np.sin(2.0 * np.pi * pat.freq * t[mask])

        positions = text_planted_positions(spec, cls)
        text_ids[positions] = pat.motif

        planted["visual"].extend(visual_planted_indices(spec, cls))
        planted["acoustic"].extend(acoustic_planted_indices(spec, cls))
        planted["textual"].extend(positions)

    planted = {k: sorted(set(v)) for k, v in planted.items()}
    return SynthSample(
        sample_id=f"{split}_{idx:05d}",
        images=np.clip(images, 0.0, 1.0),
        waveform=waveform,
        sample_rate=spec.sample_rate,
        text_ids=text_ids,
        label=label,
        planted=planted,
    )


def generate(spec: SynthSpec) -> dict[str, list[SynthSample]]:
    """Deterministic dataset splits; (spec, seed) fully determine the bytes."""
    spec.validate()
    patterns = _class_patterns(spec)
    return {
        split: [_make_sample(spec, patterns, split, si, i)
                for i in range(spec.samples_for(split))]
        for si, split in enumerate(SPLITS)
    }


def attention_mass_on_planted(weights, planted: list[int]) -> float:
    """Mean over pooled-token rows of the summed weight on planted columns."""
    w = weights.weights if hasattr(weights, "weights") else np.asarray(weights)
    planted = np.asarray(planted, dtype=np.intp)
    if planted.size == 0:
        return 0.0
    if planted.min() < 0 or planted.max() >= w.shape[1]:
        raise ValidationError(f"planted indices out of range for {w.shape[1]} tokens")
    return float(w[:, planted].sum(axis=1).mean())


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def write_dataset(splits: dict[str, list[SynthSample]], spec: SynthSpec, outdir) -> Path:
    """Binary files per sample plus one JSON manifest; returns manifest path."""
    out = storage.ensure_dir(outdir)
    manifest = {"spec": spec.to_json(), "splits": {}}
    for split, samples in splits.items():
        entries = []
        for sample in samples:
            visual_file = f"{sample.sample_id}.vimg"
            audio_file = f"{sample.sample_id}.pcmf"
            storage.write_image_file(out / visual_file, sample.images)
            storage.write_waveform_file(out / audio_file, sample.waveform, sample.sample_rate)
            entries.append({
                "id": sample.sample_id,
                "label": [int(x) for x in sample.label],
                "text_ids": [int(x) for x in sample.text_ids],
                "planted": sample.planted,
                "visual_file": visual_file,
                "audio_file": audio_file,
            })
        manifest["splits"][split] = entries
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(directory) -> tuple[SynthSpec, dict[str, list[SynthSample]]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    spec = SynthSpec.from_json(manifest["spec"])
    splits: dict[str, list[SynthSample]] = {}
    for split, entries in manifest["splits"].items():
        samples = []
        for entry in entries:
            waveform, sr = storage.read_waveform_file(directory / entry["audio_file"])
            samples.append(SynthSample(
                sample_id=entry["id"],
                images=storage.read_image_file(directory / entry["visual_file"]),
                waveform=waveform,
                sample_rate=sr,
                text_ids=np.asarray(entry["text_ids"], dtype=np.intp),
                label=np.asarray(entry["label"], dtype=np.float64),
                planted=entry["planted"],
            ))
        splits[split] = samples
    return spec, splits
