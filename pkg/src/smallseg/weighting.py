"""Per-class loss weights from cohort statistics, and the weighted loss.

Weights counter class imbalance: classes occupying less volume get larger
weights. The default scheme is median-frequency power weighting with
clipping; a manual mode accepts hand-tuned vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .volcore import InvalidArgumentError, LabelMap, ProbMap

_EPS_FREQ = 1e-9
_EPS_LOG = 1e-12


@dataclass(frozen=True)
class WeightScheme:
    alpha: float = 0.75
    clip_lo: float = 0.1
    clip_hi: float = 20.0
    mode: str = "inverse_freq_pow"
    manual_weights: tuple | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be >= 0")
        if not (0 < self.clip_lo <= self.clip_hi):
            raise InvalidArgumentError("need 0 < clip_lo <= clip_hi")
        if self.mode not in ("inverse_freq_pow", "uniform", "manual"):
            raise InvalidArgumentError(f"unknown weighting mode {self.mode!r}")
        if self.mode == "manual":
            if self.manual_weights is None:
                raise InvalidArgumentError("manual mode needs manual_weights")
            if any(w <= 0 for w in self.manual_weights):
                raise InvalidArgumentError("manual weights must all be positive")


def class_frequencies(cohort_labels: list[LabelMap]) -> np.ndarray:
    """Fraction of all voxels carrying each class, over a label cohort."""
    if not cohort_labels:
        raise InvalidArgumentError("need at least one label map")
    C = cohort_labels[0].num_classes
    counts = np.zeros(C, dtype=np.int64)
    total = 0
    for lab in cohort_labels:
        if lab.num_classes != C:
            raise InvalidArgumentError(
                f"inconsistent num_classes: {lab.num_classes} vs {C}"
            )
        counts += np.bincount(lab.data.ravel(), minlength=C)
        total += lab.data.size
    return counts.astype(np.float64) / float(total)


def compute_weights(freqs: np.ndarray, scheme: WeightScheme) -> np.ndarray:
    """Per-class weights; rarer classes never get smaller weights."""
    freqs = np.asarray(freqs, dtype=np.float64)
    C = freqs.shape[0]
    if scheme.mode == "uniform":
        return np.ones(C, dtype=np.float64)
    if scheme.mode == "manual":
        w = np.asarray(scheme.manual_weights, dtype=np.float64)
        if w.shape[0] != C:
            raise InvalidArgumentError(
                f"manual weights have length {w.shape[0]}, expected {C}"
            )
        if np.any(w <= 0):
            raise InvalidArgumentError("manual weights must all be positive")
        return w.copy()
    nonzero = freqs[freqs > 0]
    f_ref = float(np.median(nonzero)) if nonzero.size else 1.0
    w = (f_ref / np.maximum(freqs, _EPS_FREQ)) ** scheme.alpha
    return np.clip(w, scheme.clip_lo, scheme.clip_hi)


def weighted_ce(pred: ProbMap, target: LabelMap, weights) -> float:
    """Mean weighted cross-entropy of a probability map against labels."""
    if tuple(pred.dims) != tuple(target.dims):
        raise InvalidArgumentError(
            f"geometry mismatch: pred {pred.dims} vs target {target.dims}"
        )
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != pred.num_classes:
        raise InvalidArgumentError(
            f"weights length {weights.shape[0]} != num_classes {pred.num_classes}"
        )
    flat = pred.data.reshape(pred.num_classes, -1)
    idx = target.data.reshape(-1).astype(np.intp)
    p_true = flat[idx, np.arange(idx.size)].astype(np.float64)
    w = weights[idx]
    return float(np.mean(-w * np.log(np.maximum(p_true, _EPS_LOG))))


def weighted_softmax_ce_with_grad(scores: np.ndarray, labels: np.ndarray, weights):
    """Fused weighted softmax cross-entropy on raw scores.

    ``scores`` is (C, N); returns (mean loss, gradient wrt scores) with the
    gradient in the scores' dtype. This is the training-time form; it equals
    :func:`weighted_ce` of the softmaxed scores up to the log clamp.
    """
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    labels = np.ascontiguousarray(labels)
    C, N = scores.shape
    if weights.shape[0] != C:
        raise InvalidArgumentError(
            f"weights length {weights.shape[0]} != num_classes {C}"
        )
    if labels.shape[0] != N:
        raise InvalidArgumentError("labels length does not match scores")
    grad = np.empty_like(scores)
    loss_rows = np.empty(N, dtype=np.float64)
    backend.kernels().softmax_ce_grad(scores, labels.astype(np.int64), weights, grad, loss_rows)
    loss = float(loss_rows.sum() / N)
    grad /= N
    return loss, grad
