"""Per-modality prediction heads, feature fusion, decision fusion, metrics.

The head produces one logit vector per modality, optionally one from the
concatenated summaries, and collapses them with a learned per-head weight
into the final logits. Decisions are multi-label: sigmoid per class against
a threshold, ties inclusive. Weighted accuracy is balanced accuracy,
(TP/P + TN/N) / 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import numerics as nm
from .numerics import Tensor, ValidationError


@dataclass
class FusionParams:
    w_fv: Tensor  # (d, C)
    b_fv: Tensor
    w_fa: Tensor
    b_fa: Tensor
    w_fl: Tensor
    b_fl: Tensor
    w_fusion: Tensor | None  # (3d, C), absent when the fusion head is ablated
    b_fusion: Tensor | None
    w_decision: Tensor  # (n_heads, 1)
    n_classes: int

    @property
    def use_fusion_head(self) -> bool:
        return self.w_fusion is not None

    @property
    def n_heads(self) -> int:
        return 4 if self.use_fusion_head else 3

    @classmethod
    def init(cls, d: int, n_classes: int, rng: np.random.Generator, dtype=np.float64,
             use_fusion_head: bool = True, prefix: str = "fusion") -> "FusionParams":
        if n_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {n_classes}")

        def w(name, shape):
            return nm.param(rng.normal(0, 0.02, shape), dtype, f"{prefix}.{name}")

        def b(name, shape):
            return nm.param(np.zeros(shape), dtype, f"{prefix}.{name}")

        n_heads = 4 if use_fusion_head else 3
        return cls(
            w_fv=w("w_fv", (d, n_classes)), b_fv=b("b_fv", n_classes),
            w_fa=w("w_fa", (d, n_classes)), b_fa=b("b_fa", n_classes),
            w_fl=w("w_fl", (d, n_classes)), b_fl=b("b_fl", n_classes),
            w_fusion=w("w_fusion", (3 * d, n_classes)) if use_fusion_head else None,
            b_fusion=b("b_fusion", n_classes) if use_fusion_head else None,
            # uniform head averaging at init so every head sees gradient signal
            w_decision=nm.param(np.full((n_heads, 1), 1.0 / n_heads), dtype, f"{prefix}.w_decision"),
            n_classes=n_classes,
        )

    def named(self):
        yield self.w_fv.name, self.w_fv
        yield self.b_fv.name, self.b_fv
        yield self.w_fa.name, self.w_fa
        yield self.b_fa.name, self.b_fa
        yield self.w_fl.name, self.w_fl
        yield self.b_fl.name, self.b_fl
        if self.w_fusion is not None:
            yield self.w_fusion.name, self.w_fusion
            yield self.b_fusion.name, self.b_fusion
        yield self.w_decision.name, self.w_decision


@dataclass
class Predictions:
    p_v: Tensor
    p_a: Tensor
    p_l: Tensor
    p_fusion: Tensor | None
    p: Tensor  # final logits (C,)


def _vec(x) -> Tensor:
    values = x.values if hasattr(x, "values") else x
    if values.data.ndim != 1:
        raise ValidationError(f"summary must be a vector, got shape {values.shape}")
    return values


def _head(vec: Tensor, w: Tensor, b: Tensor, n_classes: int) -> Tensor:
    if vec.shape[0] != w.shape[0]:
        raise ValidationError(f"summary length {vec.shape[0]} does not match head input {w.shape[0]}")
    out = nm.add(nm.matmul(nm.reshape(vec, (1, vec.shape[0])), w), b)
    return nm.reshape(out, (n_classes,))


def fuse(v, a, v_l, params: FusionParams) -> Predictions:
    """Per-modality logits, optional concat-fusion logits, decision collapse."""
    v, a, v_l = _vec(v), _vec(a), _vec(v_l)
    c = params.n_classes
    p_v = _head(v, params.w_fv, params.b_fv, c)
    p_a = _head(a, params.w_fa, params.b_fa, c)
    p_l = _head(v_l, params.w_fl, params.b_fl, c)
    heads = [p_v, p_a, p_l]
    p_fusion = None
    if params.use_fusion_head:
        joint = nm.concat([v, a, v_l], axis=0)
        p_fusion = _head(joint, params.w_fusion, params.b_fusion, c)
        heads.append(p_fusion)
    stacked = nm.concat([nm.reshape(h, (1, c)) for h in heads], axis=0)  # (H, C)
    p = nm.reshape(nm.matmul(nm.transpose(stacked), params.w_decision), (c,))
    return Predictions(p_v=p_v, p_a=p_a, p_l=p_l, p_fusion=p_fusion, p=p)


def predict_labels(logits, threshold: float = 0.5) -> np.ndarray:
    """label_c = 1 iff sigmoid(logit_c) >= threshold (ties inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0,1), got {threshold}")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (expit(z) >= threshold).astype(np.uint8)


@dataclass
class ClassMetrics:
    accuracy: float
    weighted_accuracy: float
    f1: float


@dataclass
class MetricsReport:
    per_class: list[ClassMetrics]

    @property
    def average(self) -> ClassMetrics:
        return ClassMetrics(
            accuracy=float(np.mean([m.accuracy for m in self.per_class])),
            weighted_accuracy=float(np.mean([m.weighted_accuracy for m in self.per_class])),
            f1=float(np.mean([m.f1 for m in self.per_class])),
        )

    def csv_rows(self) -> list[list[str]]:
        rows = [["class", "accuracy", "weighted_accuracy", "f1"]]
        for i, m in enumerate(self.per_class):
            rows.append([f"class_{i}", f"{m.accuracy:.6f}", f"{m.weighted_accuracy:.6f}", f"{m.f1:.6f}"])
        avg = self.average
        rows.append(["average", f"{avg.accuracy:.6f}", f"{avg.weighted_accuracy:.6f}", f"{avg.f1:.6f}"])
        return rows


def metrics(preds: np.ndarray, targets: np.ndarray) -> MetricsReport:
    """Per-class accuracy, balanced accuracy, and F1 over (samples, classes)."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if preds.shape != targets.shape or preds.ndim != 2:
        raise ValidationError(f"prediction/target shapes differ: {preds.shape} vs {targets.shape}")
    for arr, name in ((preds, "preds"), (targets, "targets")):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError(f"{name} must be binary")
    out = []
    for c in range(preds.shape[1]):
        p, t = preds[:, c], targets[:, c]
        acc = float(np.mean(p == t))
        pos, neg = int((t == 1).sum()), int((t == 0).sum())
        tp = int(((p == 1) & (t == 1)).sum())
        tn = int(((p == 0) & (t == 0)).sum())
        fp = int(((p == 1) & (t == 0)).sum())
        recall_pos = tp / pos if pos else 1.0  # vacuously perfect when no positives exist
        recall_neg = tn / neg if neg else 1.0
        wacc = (recall_pos + recall_neg) / 2.0
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / pos if pos else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        out.append(ClassMetrics(accuracy=acc, weighted_accuracy=wacc, f1=f1))
    return MetricsReport(per_class=out)
