"""Losses and evaluation metrics.

Per stage the objective pairs a summed binary cross-entropy with an IoU
loss; stage losses combine through per-stage weights. The summed form is
the reported quantity; for optimizer stability the trainer uses an
objective whose cross-entropy part is divided by the pixel count (the IoU
term is already scale free) -- both appear in the report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, clip, log, resize_bilinear, reshape, sigmoid, tsum

__all__ = ["bce_loss", "iou_loss", "total_loss", "LossReport", "miou", "f_measure"]

CLAMP_EPS = 1e-7
DENOM_EPS = 1e-7


def _check_same_shape(p: Tensor, g: Tensor) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} disagree")


def bce_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Summed binary cross-entropy; probabilities are clamped away from 0/1."""
    _check_same_shape(probs, target)
    p = clip(probs, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return -tsum(target * log(p) + (1.0 - target) * log(1.0 - p))


def iou_loss(probs: Tensor, target: Tensor) -> Tensor:
    """1 - soft intersection over union, a holistic overlap penalty."""
    _check_same_shape(probs, target)
    inter = tsum(target * probs)
    union = tsum(probs + target - target * probs)
    return 1.0 - inter / clip(union, DENOM_EPS, float("inf"))


@dataclass
class LossReport:
    bce: list[float]  # per stage, summed form
    iou: list[float]
    stage: list[float]  # bce + iou per stage
    total: float  # weighted sum of stage losses
    normalized_stage: list[float]  # bce/pixels + iou per stage
    normalized_total: float
    objective: Tensor  # gradient-tracked normalized total


def total_loss(outputs: list[Tensor], target: Tensor, weights) -> LossReport:
    """Score all four stage outputs against one ground-truth mask.

    ``outputs`` are logit maps [T, h_i, w_i, 1] finest first; each is
    resized to the target's resolution with bilinear interpolation before
    the sigmoid.
    """
    if target.ndim != 3:
        raise ShapeError(f"expected target [T, H, W], got {target.shape}")
    t, hgt, wid = target.shape
    n_pixels = float(t * hgt * wid)
    bce_terms: list[Tensor] = []
    iou_terms: list[Tensor] = []
    for logits in outputs:
        up = resize_bilinear(logits, hgt, wid)
        probs = reshape(sigmoid(up), (t, hgt, wid))
        bce_terms.append(bce_loss(probs, target))
        iou_terms.append(iou_loss(probs, target))

    objective = None
    total = 0.0
    normalized = []
    for w, b, i in zip(weights, bce_terms, iou_terms):
        total += w * (b.item() + i.item())
        normalized.append(b.item() / n_pixels + i.item())
        term = (b * (1.0 / n_pixels) + i) * float(w)
        objective = term if objective is None else objective + term
    return LossReport(
        bce=[b.item() for b in bce_terms],
        iou=[i.item() for i in iou_terms],
        stage=[b.item() + i.item() for b, i in zip(bce_terms, iou_terms)],
        total=total,
        normalized_stage=normalized,
        normalized_total=objective.item(),
        objective=objective,
    )


def _as_binary(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.astype(bool)


def miou(pred, target) -> float:
    """Mean over frames of |pred & gt| / |pred | gt|; empty unions score 1."""
    p, g = _as_binary(pred), _as_binary(target)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} disagree")
    if p.ndim == 2:
        p, g = p[None], g[None]
    scores = []
    for pf, gf in zip(p, g):
        union = np.logical_or(pf, gf).sum()
        if union == 0:
            scores.append(1.0)
        else:
            scores.append(np.logical_and(pf, gf).sum() / union)
    return float(np.mean(scores))


def f_measure(pred, target, beta2: float = 0.3) -> float:
    """(1 + b) * precision * recall / (b * precision + recall), frame mean.

    Empty predictions or targets give zero precision or recall; a zero
    denominator scores 0.
    """
    p, g = _as_binary(pred), _as_binary(target)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} disagree")
    if p.ndim == 2:
        p, g = p[None], g[None]
    scores = []
    for pf, gf in zip(p, g):
        tp = np.logical_and(pf, gf).sum()
        precision = tp / pf.sum() if pf.any() else 0.0
        recall = tp / gf.sum() if gf.any() else 0.0
        denom = beta2 * precision + recall
        scores.append(0.0 if denom == 0 else (1.0 + beta2) * precision * recall / denom)
    return float(np.mean(scores))
