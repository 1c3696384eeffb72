"""Analytic FLOPs model and measured time/peak-memory benchmarks.

The analytic counters mirror the kernel ops one for one under the shared
cost convention (MAC = 2 FLOPs, fixed per-element constants for softmax,
layer_norm, and GELU), so they agree exactly with the execution tape's
forward counter for the same configuration. FLOPs are forward-only;
wall-clock benchmarks time a combined forward+backward. "Memory" is the
kernel's cumulative tensor-byte counter over one forward+backward pass,
which equals the live peak because the tape retains every intermediate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import pooling
from .encoder import TransformerConfig
from .featurize import TokenSequence
from .fusion import fuse
from .numerics import (
    ADD_FLOPS_PER_ELEM,
    GELU_FLOPS_PER_ELEM,
    LAYER_NORM_FLOPS_PER_ELEM,
    SCALE_FLOPS_PER_ELEM,
    SOFTMAX_FLOPS_PER_ELEM,
    Tape,
    matmul_flops,
)
from .pooling import CoreParams, ModelConfig


@dataclass(frozen=True)
class Lengths:
    """Token counts entering the model: visual, acoustic, textual."""

    q: int
    m: int
    n_text: int


@dataclass
class FlopsReport:
    components: dict[str, int]
    config: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())


@dataclass
class BenchReport:
    mean_s: float
    std_s: float
    runs: int
    peak_bytes: int


def encoder_terms(n_tokens: int, cfg: TransformerConfig) -> dict[str, int]:
    """Per-term forward cost of one encoder run on n_tokens inputs.

    The summary token is prepended, so every term uses l = n_tokens + 1.
    """
    l = n_tokens + 1
    d, k, d_h = cfg.d, cfg.k, cfg.d_h
    terms = {
        "positions": l * d * ADD_FLOPS_PER_ELEM,
        "layer_norm": 0, "qkv": 0, "scores": 0, "attn_scale_softmax": 0,
        "aggregate": 0, "projection": 0, "ffn": 0, "residual_bias": 0,
    }
    for _ in range(cfg.L):
        terms["layer_norm"] += 2 * l * d * LAYER_NORM_FLOPS_PER_ELEM
        terms["qkv"] += matmul_flops(l, d, 3 * d)
        terms["scores"] += k * matmul_flops(l, d_h, l)
        terms["attn_scale_softmax"] += k * (l * l * SCALE_FLOPS_PER_ELEM + l * l * SOFTMAX_FLOPS_PER_ELEM)
        terms["aggregate"] += k * matmul_flops(l, l, d_h)
        terms["projection"] += matmul_flops(l, d, d)
        terms["ffn"] += (
            matmul_flops(l, d, 4 * d)
            + l * 4 * d * ADD_FLOPS_PER_ELEM
            + l * 4 * d * GELU_FLOPS_PER_ELEM
            + matmul_flops(l, 4 * d, d)
            + l * d * ADD_FLOPS_PER_ELEM
        )
        terms["residual_bias"] += 2 * l * d * ADD_FLOPS_PER_ELEM
    return terms


def flops_attention_block(n_tokens: int, cfg: TransformerConfig) -> int:
    """Forward FLOPs of one encoder run (L blocks plus the position add)."""
    return sum(encoder_terms(n_tokens, cfg).values())


def flops_attend_pool(n_tokens: int, d: int, m: int, k_tokens: int) -> int:
    """Score projection, per-column softmax, and pooled aggregation."""
    return (
        matmul_flops(n_tokens, (1 + m) * d, k_tokens)
        + n_tokens * k_tokens * ADD_FLOPS_PER_ELEM
        + n_tokens * k_tokens * SOFTMAX_FLOPS_PER_ELEM
        + matmul_flops(k_tokens, n_tokens, d)
    )


def flops_fuse(d: int, n_classes: int, use_fusion_head: bool = True) -> int:
    heads = 3 * (matmul_flops(1, d, n_classes) + n_classes * ADD_FLOPS_PER_ELEM)
    if use_fusion_head:
        heads += matmul_flops(1, 3 * d, n_classes) + n_classes * ADD_FLOPS_PER_ELEM
    n_heads = 4 if use_fusion_head else 3
    return heads + matmul_flops(n_classes, n_heads, 1)


def flops_model(variant: str, lengths: Lengths, k_tokens: int, cfg: TransformerConfig,
                n_classes: int = 4) -> FlopsReport:
    """Forward FLOPs of one token-level pass (pools + encoders + head)."""
    wiring = pooling.pool_wiring(variant)
    d = cfg.d
    components = {"textual_encoder": flops_attention_block(lengths.n_text, cfg)}
    if variant == "no_attention":
        components["pools"] = 0
        components["visual_encoder"] = flops_attention_block(lengths.q, cfg)
        components["acoustic_encoder"] = flops_attention_block(lengths.m, cfg)
    else:
        pools = flops_attend_pool(lengths.q, d, 1, k_tokens)
        pools += flops_attend_pool(lengths.m, d, 2, k_tokens)
        visual_runs = 1
        if pooling.PASS_VISUAL_2 in wiring:
            pools += flops_attend_pool(lengths.q, d, 2, k_tokens)
            visual_runs = 2
        components["pools"] = pools
        # shared weights do not reduce compute: the visual encoder runs per pass
        components["visual_encoder"] = visual_runs * flops_attention_block(k_tokens, cfg)
        components["acoustic_encoder"] = flops_attention_block(k_tokens, cfg)
    components["fusion"] = flops_fuse(d, n_classes, use_fusion_head=variant != "no_feature_fusion")
    echo = {"variant": variant, "Q": lengths.q, "M": lengths.m, "N_text": lengths.n_text,
            "K": k_tokens, "d": cfg.d, "k": cfg.k, "d_h": cfg.d_h, "L": cfg.L}
    return FlopsReport(components=components, config=echo)


# ---------------------------------------------------------------------------
# measured benchmarks
# ---------------------------------------------------------------------------

PAPER_SCALE = TransformerConfig(d=768, k=12, d_h=64, L=12, max_tokens=1024)
DESK_SCALE = TransformerConfig(d=64, k=4, d_h=16, L=4, max_tokens=1024)
DEFAULT_LENGTHS = Lengths(q=576, m=512, n_text=300)
WARMUP_RUNS = 3


class BenchModel:
    """Token-level model plus fixed random inputs for repeated passes."""

    def __init__(self, variant: str, lengths: Lengths, k_tokens: int,
                 cfg: TransformerConfig, n_classes: int = 4, seed: int = 0):
        model_cfg = ModelConfig(
            d=cfg.d, k=cfg.k, d_h=cfg.d_h, L=cfg.L, k_tokens=k_tokens,
            n_classes=n_classes, variant=variant,
            max_visual_tokens=lengths.q, max_acoustic_tokens=lengths.m,
            max_text_tokens=lengths.n_text,
        )
        rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        self.core = CoreParams.build(model_cfg, rng, dtype=np.float32)
        self.visual = rng.normal(size=(lengths.q, cfg.d)).astype(np.float32)
        self.acoustic = rng.normal(size=(lengths.m, cfg.d)).astype(np.float32)
        self.textual = rng.normal(size=(lengths.n_text, cfg.d)).astype(np.float32)
        self.target = (rng.random(n_classes) > 0.5).astype(np.float32)
        if not self.target.any():
            self.target[0] = 1.0
        self.params = [t for _, t in self.core.named()]

    def forward_backward(self) -> Tape:
        nm.zero_grads(self.params)
        with Tape(np.float32) as tape:
            state = pooling.forward(
                self.core,
                TokenSequence(nm.tensor(self.visual), "visual"),
                TokenSequence(nm.tensor(self.acoustic), "acoustic"),
                TokenSequence(nm.tensor(self.textual), "textual"),
            )
            preds = fuse(state.v, state.a, state.v_l, self.core.fusion)
            loss = nm.bce_with_logits(preds.p, self.target)
            tape.backward(loss)
        return tape

    def forward_flops(self) -> int:
        """Tape count of one forward pass (pools + encoders + head, no loss)."""
        with Tape(np.float32) as tape:
            state = pooling.forward(
                self.core,
                TokenSequence(nm.tensor(self.visual), "visual"),
                TokenSequence(nm.tensor(self.acoustic), "acoustic"),
                TokenSequence(nm.tensor(self.textual), "textual"),
            )
            fuse(state.v, state.a, state.v_l, self.core.fusion)
        return tape.flops


def bench_time(variant: str, lengths: Lengths, k_tokens: int, cfg: TransformerConfig,
               runs: int = 100, n_classes: int = 4, seed: int = 0) -> BenchReport:
    """Mean/stddev of `runs` forward+backward passes after 3 untimed warmups."""
    if runs < 1:
        raise nm.ValidationError(f"need at least one run, got {runs}")
    model = BenchModel(variant, lengths, k_tokens, cfg, n_classes, seed)
    peak = 0
    for _ in range(WARMUP_RUNS):
        peak = model.forward_backward().alloc_bytes
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        model.forward_backward()
        times.append(time.perf_counter() - start)
    times = np.asarray(times)
    return BenchReport(mean_s=float(times.mean()), std_s=float(times.std()),
                       runs=runs, peak_bytes=peak)


def bench_memory(variant: str, lengths: Lengths, k_tokens: int, cfg: TransformerConfig,
                 n_classes: int = 4, seed: int = 0) -> int:
    """Peak tensor bytes of one forward+backward pass on a fresh tape."""
    model = BenchModel(variant, lengths, k_tokens, cfg, n_classes, seed)
    return model.forward_backward().alloc_bytes
