"""Pre-LN transformer encoder with a learned summary token.

Block structure: z' = MSA(LN(z)) + z; z = FFN(LN(z')) + z'. A learned
summary token is prepended at position 0 and learned position embeddings
are added before the first block; the position-0 state after the last block
is the sequence summary. No final LayerNorm after the last block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .featurize import TokenSequence
from .numerics import Tensor, ValidationError

FFN_MULT = 4
INIT_STD = 0.02


@dataclass(frozen=True)
class TransformerConfig:
    d: int
    k: int
    d_h: int
    L: int
    max_tokens: int

    def __post_init__(self):
        if self.k * self.d_h != self.d:
            raise ValidationError(f"head count {self.k} x head width {self.d_h} must equal width {self.d}")
        if self.L < 0 or self.max_tokens < 1:
            raise ValidationError(f"invalid layer count {self.L} or max_tokens {self.max_tokens}")


@dataclass
class LayerParams:
    w_qkv: Tensor  # (d, 3d), column blocks [Q | K | V], head-major inside each block
    w_msa: Tensor  # (d, d)
    w1: Tensor  # (d, 4d)
    b1: Tensor  # (4d,)
    w2: Tensor  # (4d, d)
    b2: Tensor  # (d,)
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def named(self):
        for f in ("w_qkv", "w_msa", "w1", "b1", "w2", "b2",
                  "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            t = getattr(self, f)
            yield t.name, t


@dataclass
class EncoderParams:
    layers: list[LayerParams]
    x_cls: Tensor  # (d,)
    e_pos: Tensor  # (max_tokens+1, d), row 0 for the summary slot

    @classmethod
    def init(cls, cfg: TransformerConfig, rng: np.random.Generator,
             dtype=np.float64, prefix: str = "enc") -> "EncoderParams":
        d = cfg.d
        layers = []
        for i in range(cfg.L):
            pre = f"{prefix}.layer{i}"
            layers.append(LayerParams(
                w_qkv=nm.param(rng.normal(0, INIT_STD, (d, 3 * d)), dtype, f"{pre}.w_qkv"),
                w_msa=nm.param(rng.normal(0, INIT_STD, (d, d)), dtype, f"{pre}.w_msa"),
                w1=nm.param(rng.normal(0, INIT_STD, (d, FFN_MULT * d)), dtype, f"{pre}.w1"),
                b1=nm.param(np.zeros(FFN_MULT * d), dtype, f"{pre}.b1"),
                w2=nm.param(rng.normal(0, INIT_STD, (FFN_MULT * d, d)), dtype, f"{pre}.w2"),
                b2=nm.param(np.zeros(d), dtype, f"{pre}.b2"),
                ln1_gamma=nm.param(np.ones(d), dtype, f"{pre}.ln1_gamma"),
                ln1_beta=nm.param(np.zeros(d), dtype, f"{pre}.ln1_beta"),
                ln2_gamma=nm.param(np.ones(d), dtype, f"{pre}.ln2_gamma"),
                ln2_beta=nm.param(np.zeros(d), dtype, f"{pre}.ln2_beta"),
            ))
        return cls(
            layers=layers,
            x_cls=nm.param(rng.normal(0, INIT_STD, d), dtype, f"{prefix}.x_cls"),
            e_pos=nm.param(rng.normal(0, INIT_STD, (cfg.max_tokens + 1, d)), dtype, f"{prefix}.e_pos"),
        )

    def named(self):
        for layer in self.layers:
            yield from layer.named()
        yield self.x_cls.name, self.x_cls
        yield self.e_pos.name, self.e_pos


@dataclass
class SummaryVector:
    """Position-0 encoder state standing in for the whole sequence."""

    values: Tensor  # (d,)
    modality: str


def msa(x: Tensor, layer: LayerParams, cfg: TransformerConfig) -> Tensor:
    """Multi-head scaled dot-product self-attention over rows of x (l, d)."""
    l, d = x.shape
    qkv = nm.matmul(x, layer.w_qkv)  # (l, 3d)
    q = nm.slice_cols(qkv, 0, d)
    k = nm.slice_cols(qkv, d, 2 * d)
    v = nm.slice_cols(qkv, 2 * d, 3 * d)
    heads = []
    inv_scale = 1.0 / math.sqrt(cfg.d_h)
    for h in range(cfg.k):
        lo, hi = h * cfg.d_h, (h + 1) * cfg.d_h
        qh = nm.slice_cols(q, lo, hi)
        kh = nm.slice_cols(k, lo, hi)
        vh = nm.slice_cols(v, lo, hi)
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), inv_scale)  # (l, l)
        attn = nm.softmax(scores, axis=-1)
        heads.append(nm.matmul(attn, vh))  # (l, d_h)
    return nm.matmul(nm.concat(heads, axis=1), layer.w_msa)


def ffn(z: Tensor, layer: LayerParams) -> Tensor:
    """GELU(z @ w1 + b1) @ w2 + b2, rowwise."""
    hidden = nm.gelu(nm.add(nm.matmul(z, layer.w1), layer.b1))
    return nm.add(nm.matmul(hidden, layer.w2), layer.b2)


def encode(tokens: TokenSequence, params: EncoderParams, cfg: TransformerConfig
           ) -> tuple[SummaryVector, Tensor]:
    """Prepend the summary token, add positions, run L pre-LN blocks."""
    n = tokens.count
    max_tokens = params.e_pos.shape[0] - 1
    if n > max_tokens:
        raise ValidationError(f"{n} tokens exceed the encoder's max_tokens of {max_tokens}")
    if tokens.width != cfg.d:
        raise ValidationError(f"token width {tokens.width} does not match model width {cfg.d}")
    z = nm.concat([nm.reshape(params.x_cls, (1, cfg.d)), tokens.tokens], axis=0)
    z = nm.add(z, nm.slice_rows(params.e_pos, 0, n + 1))
    for layer in params.layers:
        z_attn = nm.add(msa(nm.layer_norm(z, layer.ln1_gamma, layer.ln1_beta), layer, cfg), z)
        z = nm.add(ffn(nm.layer_norm(z_attn, layer.ln2_gamma, layer.ln2_beta), layer), z_attn)
    return SummaryVector(values=nm.row(z, 0), modality=tokens.modality), z
