"""Flat binary file formats shared by the dataset and training tools.

Image stack (.vimg):  magic b"VIMG", then uint32 LE J, H, W, C, then
    J*H*W*C float32 LE pixel values, row-major.
Waveform (.pcmf):     magic b"PCMF", then uint32 LE sample_rate, uint32 LE
    sample count, then float32 LE PCM samples.
Checkpoint (.ckpt):   magic b"CKPT", uint32 LE parameter count, then per
    parameter: uint16 LE name length, UTF-8 name, uint8 ndim, ndim uint32 LE
    dims, float32 LE values row-major. Parameter order is the model's
    deterministic named order.
Attention map (.pgm): binary P5, 8-bit, weights min-max scaled.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numerics import ValidationError

IMAGE_MAGIC = b"VIMG"
WAVE_MAGIC = b"PCMF"
CKPT_MAGIC = b"CKPT"


def write_image_file(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValidationError(f"image stack must be (J,H,W,C), got {images.shape}")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<4I", *images.shape))
        fh.write(images.tobytes())


def read_image_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != IMAGE_MAGIC:
            raise ValidationError(f"{path}: not an image stack file")
        j, h, w, c = struct.unpack("<4I", fh.read(16))
        data = np.frombuffer(fh.read(4 * j * h * w * c), dtype="<f4")
    return data.reshape(j, h, w, c).astype(np.float64)


def write_waveform_file(path, waveform: np.ndarray, sample_rate: int) -> None:
    waveform = np.asarray(waveform, dtype=np.float32).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(WAVE_MAGIC)
        fh.write(struct.pack("<II", int(sample_rate), waveform.size))
        fh.write(waveform.tobytes())


def read_waveform_file(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != WAVE_MAGIC:
            raise ValidationError(f"{path}: not a waveform file")
        sample_rate, count = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * count), dtype="<f4")
    return data.astype(np.float64), sample_rate


def write_checkpoint(path, named_params) -> None:
    """named_params: iterable of (name, Tensor) in deterministic order."""
    entries = list(named_params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            raw = name.encode("utf-8")
            data = np.asarray(tensor.data, dtype=np.float32)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.astype(np.float64)
    return out


def write_pgm(path, weights: np.ndarray) -> None:
    """Min-max scale a 2-D weight matrix into an 8-bit binary PGM."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    scaled = np.zeros_like(w) if hi == lo else (w - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w.shape[1]} {w.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
