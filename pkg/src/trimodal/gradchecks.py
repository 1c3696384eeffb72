"""Named finite-difference checks for every differentiable op and the model.

Each entry compares the tape gradient of a scalar function against central
differences in float64. `run_suite` returns (name, report) pairs; the
optional fault argument swaps in a deliberately wrong backward so the
harness itself can be shown to catch bad gradients.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from . import pooling
from .encoder import EncoderParams, TransformerConfig, encode
from .featurize import TokenSequence
from .fusion import FusionParams, fuse
from .model import FeatureGeometry, FeaturizedSample, TriModalModel
from .numerics import GradCheckReport, grad_check, param, tensor
from .pooling import CoreParams, ModelConfig, PoolParams, attend_pool

FAULTS = ("gelu_sign",)


def _seq(x, modality="visual"):
    return TokenSequence(tokens=tensor(np.asarray(x)), modality=modality)


def _gelu(x, fault):
    if fault == "gelu_sign":
        return nm.unary_op(
            x,
            lambda d: d * 0.5 * (1.0 + np.vectorize(math.erf)(d / math.sqrt(2.0))),
            lambda g, d, out: -g,  # deliberately wrong
            flops_per_elem=nm.GELU_FLOPS_PER_ELEM,
        )
    return nm.gelu(x)


def run_suite(fault: str | None = None, tolerance: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    if fault is not None and fault not in FAULTS:
        raise nm.ValidationError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    rng = np.random.default_rng(1234)
    checks: list[tuple[str, GradCheckReport]] = []

    def check(name, fn, params):
        checks.append((name, grad_check(fn, params, tolerance=tolerance)))

    # primitives
    a = param(rng.normal(size=(2, 3)), name="a")
    b = param(rng.normal(size=(3, 2)), name="b")
    w23 = rng.normal(size=(2, 3))
    check("matmul", lambda ps: nm.sum_all(ps[0] @ ps[1]), [a, b])
    bias = param(rng.normal(size=3), name="bias")
    check("add_broadcast", lambda ps: nm.sum_all(nm.mul(nm.add(ps[0], ps[1]), tensor(w23))), [a, bias])
    a2 = param(rng.normal(size=(2, 3)), name="a2")
    check("mul", lambda ps: nm.sum_all(nm.mul(nm.mul(ps[0], ps[1]), tensor(w23))), [a, a2])
    check("softmax", lambda ps: nm.sum_all(nm.mul(nm.softmax(ps[0], axis=0), tensor(w23))), [a])
    gm = param(rng.normal(size=3), name="gamma")
    bt = param(rng.normal(size=3), name="beta")
    check("layer_norm", lambda ps: nm.sum_all(nm.mul(nm.layer_norm(ps[0], ps[1], ps[2]), tensor(w23))), [a, gm, bt])
    check("gelu", lambda ps: nm.sum_all(_gelu(ps[0], fault)), [a])
    check("sigmoid", lambda ps: nm.sum_all(nm.sigmoid(ps[0])), [a])
    targets = (rng.random(3) > 0.5).astype(float)
    v = param(rng.normal(size=3), name="logits")
    check("bce_with_logits", lambda ps: nm.bce_with_logits(ps[0], targets), [v])
    check("concat_slice", lambda ps: nm.sum_all(nm.mul(
        nm.slice_rows(nm.concat([ps[0], ps[1]], axis=0), 1, 3), tensor(w23))), [a, a2])
    vec = param(rng.normal(size=3), name="vec")
    w43 = rng.normal(size=(4, 3))
    check("tile_rows", lambda ps: nm.sum_all(nm.mul(nm.tile_rows(ps[0], 4), tensor(w43))), [vec])
    table = param(rng.normal(size=(2, 3)), name="table")
    ids = np.array([0, 1, 0])
    w33 = rng.normal(size=(3, 3))
    check("gather_rows", lambda ps: nm.sum_all(nm.mul(nm.gather_rows(ps[0], ids), tensor(w33))), [table])

    # composed blocks
    pool = PoolParams.init(3, 2, 1, rng)
    toks = rng.normal(size=(4, 3))
    ctx = param(rng.normal(size=3), name="ctx")
    w_mix = rng.normal(size=(2, 3))

    def pool_fn(ps):
        pooled, _ = attend_pool(_seq(toks), [ps[2]], pool)
        return nm.sum_all(nm.mul(pooled.tokens, tensor(w_mix)))

    check("attend_pool", pool_fn, [pool.w, pool.b, ctx])

    enc_cfg = TransformerConfig(d=4, k=2, d_h=2, L=1, max_tokens=4)
    enc = EncoderParams.init(enc_cfg, rng, prefix="check_enc")
    enc_in = rng.normal(size=(3, 4))
    mix4 = rng.normal(size=4)

    def enc_fn(ps):
        summary, _ = encode(_seq(enc_in), enc, enc_cfg)
        return nm.sum_all(nm.mul(summary.values, tensor(mix4)))

    check("encoder_block", enc_fn, [t for _, t in enc.named()])

    fusion = FusionParams.init(4, 2, rng, prefix="check_fusion")
    sv = rng.normal(size=(3, 4))
    fuse_targets = np.array([1.0, 0.0])

    def fuse_fn(ps):
        preds = fuse(tensor(sv[0]), tensor(sv[1]), tensor(sv[2]), fusion)
        return nm.bce_with_logits(preds.p, fuse_targets)

    check("fusion_head", fuse_fn, [t for _, t in fusion.named()])

    # end-to-end tiny model: two-pass wiring, 4 tokens per modality
    cfg = ModelConfig(d=8, k=2, d_h=4, L=1, k_tokens=2, n_classes=2, variant="full",
                      max_visual_tokens=4, max_acoustic_tokens=4, max_text_tokens=4)
    geometry = FeatureGeometry(patch_size=2, channels=1, mel_bins=3, text_vocab=7)
    model = TriModalModel.build(cfg, geometry, rng)
    sample = FeaturizedSample(
        visual_patches=rng.random((4, geometry.visual_patch_dim)),
        acoustic_patches=rng.normal(size=(4, geometry.acoustic_patch_dim)),
        text_ids=rng.integers(0, geometry.text_vocab, size=4),
        label=np.array([1.0, 0.0]),
    )

    def model_fn(ps):
        _, preds = model.forward_sample(sample)
        return nm.bce_with_logits(preds.p, sample.label)

    check("model_end_to_end", model_fn, model.params())
    return checks


def format_table(checks: list[tuple[str, GradCheckReport]]) -> str:
    lines = [f"{'check':<20} {'max_rel_err':>12} {'coords':>7} status"]
    for name, report in checks:
        status = "pass" if report.passed else "FAIL"
        coords = sum(e.n_checked for e in report.entries)
        lines.append(f"{name:<20} {report.max_rel_err:>12.3e} {coords:>7} {status}")
    return "\n".join(lines)
