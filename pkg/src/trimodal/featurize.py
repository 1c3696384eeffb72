"""Raw modality inputs -> token sequences.

Visual: images are cut into non-overlapping PxP patches, row-major within
each image, images concatenated in order; a patch flattens its (P, P, C)
block row-major. Acoustic: waveforms become 128-bin log-Mel spectrograms
(25 ms Hamming window, 10 ms hop, HTK mel scale, natural log with a 1e-12
floor) and are cut into Fx2 patches in time order (trailing odd frame
dropped) or 16x16 square patches (time-major). Textual: token ids are
embedded as token + position + single-segment sums.

Patch splitting is lossless: `reassemble_*` inverts it exactly over the
covered region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor, ValidationError

MEL_BINS = 128
FBANK_WINDOW_S = 0.025
FBANK_HOP_S = 0.010
SQUARE_PATCH = 16
TEMPORAL_PATCH_FRAMES = 2


@dataclass
class VisualInput:
    """Stack of images (J, H, W, C) with pixel values in [0, 1]."""

    images: np.ndarray
    patch_size: int

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (J,H,W,C), got shape {self.images.shape}")
        j, h, w, c = self.images.shape
        if c not in (1, 3):
            raise ValidationError(f"channel count must be 1 or 3, got {c}")
        p = self.patch_size
        if h % p != 0 or w % p != 0:
            raise ValidationError(f"image size {h}x{w} not divisible by patch size {p}")
        lo, hi = float(self.images.min(initial=0.0)), float(self.images.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"pixel values must lie in [0,1], got range [{lo}, {hi}]")


@dataclass
class Spectrogram:
    """Log-Mel energies, mel bins x frames."""

    values: np.ndarray  # (F, T)
    frame_hop_s: float

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValidationError(f"spectrogram must be (F,T) with F,T >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("spectrogram contains non-finite values")


@dataclass
class TokenSequence:
    """N x d token matrix tagged with its modality."""

    tokens: Tensor
    modality: str

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass
class PatchEmbedParams:
    """Linear projection from flattened patches to d-wide tokens."""

    projection: Tensor  # (patch_dim, d)
    bias: Tensor  # (d,)
    geometry: str

    @classmethod
    def init(cls, patch_dim: int, d: int, rng: np.random.Generator, geometry: str,
             dtype=np.float64, prefix: str = "embed") -> "PatchEmbedParams":
        return cls(
            projection=nm.param(rng.normal(0.0, 0.02, (patch_dim, d)), dtype, f"{prefix}.projection"),
            bias=nm.param(np.zeros(d), dtype, f"{prefix}.bias"),
            geometry=geometry,
        )

    def named(self):
        yield self.projection.name, self.projection
        yield self.bias.name, self.bias


@dataclass
class TextEmbedParams:
    """Token, position, and single-segment embedding tables."""

    tokens: Tensor  # (V, d)
    positions: Tensor  # (max_len, d)
    segment: Tensor  # (d,)

    @classmethod
    def init(cls, vocab: int, max_len: int, d: int, rng: np.random.Generator,
             dtype=np.float64, prefix: str = "text_embed") -> "TextEmbedParams":
        return cls(
            tokens=nm.param(rng.normal(0.0, 0.02, (vocab, d)), dtype, f"{prefix}.tokens"),
            positions=nm.param(rng.normal(0.0, 0.02, (max_len, d)), dtype, f"{prefix}.positions"),
            segment=nm.param(rng.normal(0.0, 0.02, d), dtype, f"{prefix}.segment"),
        )

    @property
    def vocab(self) -> int:
        return self.tokens.shape[0]

    def named(self):
        yield self.tokens.name, self.tokens
        yield self.positions.name, self.positions
        yield self.segment.name, self.segment


# ---------------------------------------------------------------------------
# visual patches
# ---------------------------------------------------------------------------


def split_image_patches(vi: VisualInput) -> np.ndarray:
    """(J,H,W,C) -> (Q, P*P*C) with Q = J*H*W/P^2, row-major patch order."""
    vi.validate()
    j, h, w, c = vi.images.shape
    p = vi.patch_size
    gh, gw = h // p, w // p
    # (J, gh, p, gw, p, C) -> (J, gh, gw, p, p, C)
    blocks = vi.images.reshape(j, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(j * gh * gw, p * p * c)


def reassemble_image_patches(patches: np.ndarray, j: int, h: int, w: int, c: int, p: int) -> np.ndarray:
    gh, gw = h // p, w // p
    blocks = patches.reshape(j, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(j, h, w, c)


def visual_patch_count(j: int, h: int, w: int, p: int) -> int:
    return j * h * w // (p * p)


# ---------------------------------------------------------------------------
# log-Mel filterbank
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_matrix(mel_bins: int, window: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (mel_bins, window//2+1) from 0 Hz to Nyquist."""
    points = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    freqs = np.arange(window // 2 + 1) * (sample_rate / window)
    fb = np.zeros((mel_bins, freqs.size))
    for k in range(mel_bins):
        left, center, right = points[k], points[k + 1], points[k + 2]
        rising = (freqs - left) / (center - left)
        falling = (right - freqs) / (right - center)
        fb[k] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def fbank_frame_count(n_samples: int, sample_rate: int) -> int:
    win = round(FBANK_WINDOW_S * sample_rate)
    hop = round(FBANK_HOP_S * sample_rate)
    return 1 + (n_samples - win) // hop


def log_mel_fbank(waveform: np.ndarray, sample_rate: int, mel_bins: int = MEL_BINS) -> Spectrogram:
    """Waveform -> (mel_bins, T) log energies; T = 1 + (len-win)//hop."""
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if sample_rate < 8000:
        raise ValidationError(f"sample_rate must be >= 8000 Hz, got {sample_rate}")
    win = round(FBANK_WINDOW_S * sample_rate)
    hop = round(FBANK_HOP_S * sample_rate)
    if waveform.size < win:
        raise ValidationError(f"waveform of {waveform.size} samples is shorter than one {win}-sample window")
    n_frames = fbank_frame_count(waveform.size, sample_rate)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    frames = waveform[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2  # (T, win//2+1)
    energies = power @ mel_filter_matrix(mel_bins, win, sample_rate).T  # (T, F)
    values = np.log(np.maximum(energies, nm.LOG_FLOOR)).T
    return Spectrogram(values=values, frame_hop_s=FBANK_HOP_S)


# ---------------------------------------------------------------------------
# spectrogram patches
# ---------------------------------------------------------------------------


def split_spectrogram_patches(spec: Spectrogram, mode: str = "temporal") -> np.ndarray:
    """Cut an (F, T) spectrogram into flattened patches.

    temporal: Fx2 patches, strictly increasing time, trailing odd frame
    dropped, each flattened (F, 2) row-major. square: 16x16 patches,
    time-major (outer loop over time blocks), flattened row-major.
    """
    spec.validate()
    f, t = spec.values.shape
    if mode == "temporal":
        if t < TEMPORAL_PATCH_FRAMES:
            raise ValidationError(f"need at least {TEMPORAL_PATCH_FRAMES} frames, got {t}")
        m = t // TEMPORAL_PATCH_FRAMES
        trimmed = spec.values[:, : m * TEMPORAL_PATCH_FRAMES]  # (F, 2m)
        # (F, m, 2) -> (m, F, 2)
        return trimmed.reshape(f, m, TEMPORAL_PATCH_FRAMES).transpose(1, 0, 2).reshape(m, f * TEMPORAL_PATCH_FRAMES)
    if mode == "square":
        if f % SQUARE_PATCH != 0:
            raise ValidationError(f"mel bin count {f} not divisible by {SQUARE_PATCH}")
        if t < SQUARE_PATCH:
            raise ValidationError(f"need at least {SQUARE_PATCH} frames, got {t}")
        tb, fb = t // SQUARE_PATCH, f // SQUARE_PATCH
        trimmed = spec.values[:, : tb * SQUARE_PATCH]
        blocks = trimmed.reshape(fb, SQUARE_PATCH, tb, SQUARE_PATCH).transpose(2, 0, 1, 3)
        return blocks.reshape(tb * fb, SQUARE_PATCH * SQUARE_PATCH)
    raise ValidationError(f"unknown spectrogram patch mode {mode!r}")


def reassemble_spectrogram_patches(patches: np.ndarray, f: int) -> np.ndarray:
    """Inverse of temporal splitting over the covered frames."""
    m = patches.shape[0]
    return patches.reshape(m, f, TEMPORAL_PATCH_FRAMES).transpose(1, 0, 2).reshape(f, m * TEMPORAL_PATCH_FRAMES)


def acoustic_patch_count(frames: int) -> int:
    return frames // TEMPORAL_PATCH_FRAMES


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def embed_patches(patches: np.ndarray, params: PatchEmbedParams, modality: str) -> TokenSequence:
    """tokens[i] = patches[i] @ projection + bias."""
    if patches.ndim != 2 or patches.shape[1] != params.projection.shape[0]:
        raise ValidationError(
            f"patch dim {patches.shape[1] if patches.ndim == 2 else patches.shape} "
            f"does not match projection rows {params.projection.shape[0]}"
        )
    x = nm.tensor(patches)
    tokens = nm.add(nm.matmul(x, params.projection), params.bias)
    return TokenSequence(tokens=tokens, modality=modality)


def embed_text(token_ids: np.ndarray, params: TextEmbedParams) -> TokenSequence:
    """Token + position + segment embeddings, summed elementwise."""
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size < 1:
        raise ValidationError(f"token ids must be a non-empty 1-D sequence, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= params.vocab:
        bad = ids[(ids < 0) | (ids >= params.vocab)][0]
        raise ValidationError(f"token id {int(bad)} outside vocabulary of size {params.vocab}")
    if ids.size > params.positions.shape[0]:
        raise ValidationError(f"{ids.size} tokens exceed position table length {params.positions.shape[0]}")
    tok = nm.gather_rows(params.tokens, ids)
    pos = nm.slice_rows(params.positions, 0, ids.size)
    out = nm.add(nm.add(tok, pos), params.segment)
    return TokenSequence(tokens=out, modality="textual")
