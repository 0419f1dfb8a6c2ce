"""Confidence-induced masking.

A stage's logit map becomes a binary unconfidence mask: pixels whose
sigmoid probability falls strictly inside (1-c, c) stay 1 (still worth
attending to), everything at or beyond the band edges becomes 0
(confident, masked out). Multiplying with the previous stage's mask makes
confidence monotone across stages: once a pixel is confident it can never
become unconfident again. Masks are produced outside gradient tracking;
the thresholding has zero derivative almost everywhere.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _sigmoid_stable

__all__ = [
    "switch",
    "cim_step",
    "all_ones_mask",
    "upsample_mask2x",
    "remaining_ratio",
    "inclusion_violations",
]


def _logits_array(logits) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise ShapeError(f"expected logits [T,h,w,1] or [T,h,w], got {arr.shape}")
    return arr


def switch(logits, confidence: float) -> np.ndarray:
    """Binary unconfidence map from a logit map.

    1 where sigmoid(logit) lies strictly inside (1-c, c); 0 on and outside
    the band edges. c = 0.5 degenerates to an empty band (all zeros).
    """
    if not 0.0 < confidence <= 1.0:
        raise ValueError(f"confidence threshold must lie in (0, 1], got {confidence}")
    p = _sigmoid_stable(_logits_array(logits).astype(np.float64))
    band = (p > 1.0 - confidence) & (p < confidence)
    return band.astype(np.float32)


def cim_step(mask: np.ndarray, logits, confidence: float) -> np.ndarray:
    """Combine the stage mask with the fresh switch map, then upsample x2.

    The multiplication happens at the current stage's resolution; the
    nearest-neighbor doubling aligns the result with the next (shallower)
    stage.
    """
    fresh = switch(logits, confidence)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != fresh.shape:
        raise ShapeError(f"mask {mask.shape} does not match logits {fresh.shape}")
    return upsample_mask2x(fresh * mask)


def all_ones_mask(t: int, h: int, w: int) -> np.ndarray:
    return np.ones((t, h, w), dtype=np.float32)


def upsample_mask2x(mask: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(mask, 2, axis=1), 2, axis=2)


def remaining_ratio(mask: np.ndarray) -> float:
    """Fraction of tokens still kept as queries (the 1 - r telemetry)."""
    return float(np.asarray(mask).mean())


def inclusion_violations(fine: np.ndarray, coarse: np.ndarray) -> int:
    """Count fine-mask pixels set to 1 whose covering coarse pixel is 0.

    Zero everywhere is the progression guarantee: a pixel can only stay
    unconfident if it was unconfident at the deeper stage.
    """
    fine = np.asarray(fine)
    coarse = np.asarray(coarse)
    t, h, w = coarse.shape
    if fine.shape != (t, 2 * h, 2 * w):
        raise ShapeError(f"fine mask {fine.shape} is not a x2 refinement of {coarse.shape}")
    return int(((fine == 1) & (upsample_mask2x(coarse) == 0)).sum())
