"""Two-pass cross-modal token pooling.

Each pool maps N input tokens to K output tokens: concatenate every token
with repeated context summary vectors, project to K score columns, softmax
each column over the N tokens, and form the outputs as the resulting convex
combinations of the inputs. The full model runs three pools: visual tokens
conditioned on the text summary, acoustic tokens conditioned on text plus
the first visual summary, then the visual tokens again conditioned on text
plus the acoustic summary, with the second visual pass reusing the same
visual encoder parameters as the first.

Note: because a context vector contributes the same additive score to every
row of a column and the softmax normalizes per column, the attention
weights (and therefore the pooled tokens) are invariant to the context
values; context projections receive zero gradient. The wiring keeps the
contexts because the parameterization is shaped around them, but only the
token-dependent half of each pool projection is trainable in effect. Tests
pin this invariance down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoder import EncoderParams, SummaryVector, TransformerConfig, encode
from .featurize import TokenSequence
from .fusion import FusionParams
from .numerics import Tensor, ValidationError, active_tape

VARIANTS = ("full", "no_two_pass", "no_attention", "no_feature_fusion")

PASS_VISUAL_1 = "visual_pass1"
PASS_ACOUSTIC = "acoustic"
PASS_VISUAL_2 = "visual_pass2"


def pool_wiring(variant: str) -> tuple[str, ...]:
    """Attention passes a variant executes, in order."""
    if variant in ("full", "no_feature_fusion"):
        return (PASS_VISUAL_1, PASS_ACOUSTIC, PASS_VISUAL_2)
    if variant == "no_two_pass":
        return (PASS_VISUAL_1, PASS_ACOUSTIC)
    if variant == "no_attention":
        return ()
    raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class PoolParams:
    """Projection from context-augmented tokens to K attention columns."""

    w: Tensor  # ((1+m)*d, K)
    b: Tensor  # (K,)
    k_tokens: int
    m: int

    @classmethod
    def init(cls, d: int, k_tokens: int, m: int, rng: np.random.Generator,
             dtype=np.float64, prefix: str = "pool") -> "PoolParams":
        if k_tokens < 1 or m not in (1, 2):
            raise ValidationError(f"invalid pool geometry K={k_tokens}, m={m}")
        return cls(
            w=nm.param(rng.normal(0, 0.02, ((1 + m) * d, k_tokens)), dtype, f"{prefix}.w"),
            b=nm.param(np.zeros(k_tokens), dtype, f"{prefix}.b"),
            k_tokens=k_tokens,
            m=m,
        )

    def named(self):
        yield self.w.name, self.w
        yield self.b.name, self.b


@dataclass
class AttentionMap:
    """Forward attention weights of one pool: rows are pooled tokens."""

    weights: np.ndarray  # (K, N), each row a distribution over input tokens
    modality: str
    pass_tag: str


@dataclass
class TriModalState:
    """Everything one tri-modal forward produces besides the logits."""

    v_l: SummaryVector
    v_one: SummaryVector | None
    a: SummaryVector
    v: SummaryVector
    z_v: Tensor | None
    z_a: Tensor | None
    z_vhat: Tensor | None
    maps: list[AttentionMap] = field(default_factory=list)
    pool_flops: int = 0

    def map_by_tag(self, tag: str) -> AttentionMap:
        for m in self.maps:
            if m.pass_tag == tag:
                return m
        raise KeyError(tag)


def _context_values(ctx) -> Tensor:
    return ctx.values if isinstance(ctx, SummaryVector) else ctx


def attend_pool(tokens: TokenSequence, contexts: list, params: PoolParams,
                pass_tag: str = "") -> tuple[TokenSequence, AttentionMap]:
    """Pool N tokens into K convex combinations guided by context vectors."""
    n, d = tokens.tokens.shape
    if n < 1:
        raise ValidationError("attend_pool needs at least one token")
    ctx = [_context_values(c) for c in contexts]
    if len(ctx) != params.m:
        raise ValidationError(f"pool expects {params.m} context vectors, got {len(ctx)}")
    for c in ctx:
        if c.shape != (d,):
            raise ValidationError(f"context shape {c.shape} does not match token width {d}")
    augmented = nm.concat([tokens.tokens] + [nm.tile_rows(c, n) for c in ctx], axis=1)
    scores = nm.add(nm.matmul(augmented, params.w), params.b)  # (N, K)
    attn = nm.softmax(scores, axis=0)  # each of the K columns sums to 1 over tokens
    pooled = nm.matmul(nm.transpose(attn), tokens.tokens)  # (K, d)
    amap = AttentionMap(weights=np.array(attn.data.T), modality=tokens.modality, pass_tag=pass_tag)
    return TokenSequence(tokens=pooled, modality=tokens.modality), amap


@dataclass(frozen=True)
class ModelConfig:
    d: int
    k: int
    d_h: int
    L: int
    k_tokens: int  # pooled token count K
    n_classes: int
    variant: str
    max_visual_tokens: int
    max_acoustic_tokens: int
    max_text_tokens: int

    def __post_init__(self):
        pool_wiring(self.variant)  # validates the variant name
        if self.k * self.d_h != self.d:
            raise ValidationError(f"head count {self.k} x head width {self.d_h} must equal width {self.d}")
        if self.k_tokens < 1:
            raise ValidationError(f"pooled token count must be >= 1, got {self.k_tokens}")
        if self.n_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.n_classes}")
        for name in ("max_visual_tokens", "max_acoustic_tokens", "max_text_tokens"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    def encoder_cfg(self, modality: str) -> TransformerConfig:
        if modality == "textual":
            max_tokens = self.max_text_tokens
        elif self.variant == "no_attention":
            max_tokens = self.max_visual_tokens if modality == "visual" else self.max_acoustic_tokens
        else:
            max_tokens = self.k_tokens
        return TransformerConfig(d=self.d, k=self.k, d_h=self.d_h, L=self.L, max_tokens=max_tokens)


@dataclass
class CoreParams:
    """Token-level model: three encoders, the pools, and the fusion head."""

    cfg: ModelConfig
    enc_v: EncoderParams
    enc_a: EncoderParams
    enc_l: EncoderParams
    pool_v1: PoolParams | None
    pool_a: PoolParams | None
    pool_v2: PoolParams | None
    fusion: FusionParams

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> "CoreParams":
        pools_on = cfg.variant != "no_attention"
        two_pass = cfg.variant in ("full", "no_feature_fusion")
        return cls(
            cfg=cfg,
            enc_v=EncoderParams.init(cfg.encoder_cfg("visual"), rng, dtype, "enc_visual"),
            enc_a=EncoderParams.init(cfg.encoder_cfg("acoustic"), rng, dtype, "enc_acoustic"),
            enc_l=EncoderParams.init(cfg.encoder_cfg("textual"), rng, dtype, "enc_textual"),
            pool_v1=PoolParams.init(cfg.d, cfg.k_tokens, 1, rng, dtype, "pool_visual1") if pools_on else None,
            pool_a=PoolParams.init(cfg.d, cfg.k_tokens, 2, rng, dtype, "pool_acoustic") if pools_on else None,
            pool_v2=PoolParams.init(cfg.d, cfg.k_tokens, 2, rng, dtype, "pool_visual2") if two_pass else None,
            fusion=FusionParams.init(
                cfg.d, cfg.n_classes, rng, dtype,
                use_fusion_head=cfg.variant != "no_feature_fusion",
            ),
        )

    def named(self):
        yield from self.enc_v.named()
        yield from self.enc_a.named()
        yield from self.enc_l.named()
        for pool in (self.pool_v1, self.pool_a, self.pool_v2):
            if pool is not None:
                yield from pool.named()
        yield from self.fusion.named()


def forward(core: CoreParams, visual: TokenSequence, acoustic: TokenSequence,
            textual: TokenSequence) -> TriModalState:
    """Run the variant's wiring over three token sequences."""
    for seq, name in ((visual, "visual"), (acoustic, "acoustic"), (textual, "textual")):
        if seq.count < 1:
            raise ValidationError(f"{name} token sequence is empty")
    cfg = core.cfg
    tape = active_tape()
    v_l, _ = encode(textual, core.enc_l, cfg.encoder_cfg("textual"))

    if cfg.variant == "no_attention":
        v_sum, _ = encode(visual, core.enc_v, cfg.encoder_cfg("visual"))
        a_sum, _ = encode(acoustic, core.enc_a, cfg.encoder_cfg("acoustic"))
        return TriModalState(v_l=v_l, v_one=None, a=a_sum, v=v_sum,
                             z_v=None, z_a=None, z_vhat=None, maps=[], pool_flops=0)

    pool_flops = 0
    before = tape.flops
    z_v, map1 = attend_pool(visual, [v_l], core.pool_v1, PASS_VISUAL_1)
    pool_flops += tape.flops - before
    v_one, _ = encode(z_v, core.enc_v, cfg.encoder_cfg("visual"))

    before = tape.flops
    z_a, map2 = attend_pool(acoustic, [v_one, v_l], core.pool_a, PASS_ACOUSTIC)
    pool_flops += tape.flops - before
    a_sum, _ = encode(z_a, core.enc_a, cfg.encoder_cfg("acoustic"))

    if cfg.variant == "no_two_pass":
        return TriModalState(v_l=v_l, v_one=v_one, a=a_sum, v=v_one,
                             z_v=z_v.tokens, z_a=z_a.tokens, z_vhat=None,
                             maps=[map1, map2], pool_flops=pool_flops)

    before = tape.flops
    z_vhat, map3 = attend_pool(visual, [a_sum, v_l], core.pool_v2, PASS_VISUAL_2)
    pool_flops += tape.flops - before
    v_sum, _ = encode(z_vhat, core.enc_v, cfg.encoder_cfg("visual"))  # same visual encoder params
    return TriModalState(v_l=v_l, v_one=v_one, a=a_sum, v=v_sum,
                         z_v=z_v.tokens, z_a=z_a.tokens, z_vhat=z_vhat.tokens,
                         maps=[map1, map2, map3], pool_flops=pool_flops)
