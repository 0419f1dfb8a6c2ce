"""Audio-visual group attention.

Channels split into g groups; within each group the (projected) audio
vector and every pixel are L2-normalized and dotted, producing one cosine
map per group and frame. The maps modulate the visual feature with a
residual add before a consolidating CBR, so pixels orthogonal to the audio
are attenuated rather than annihilated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import CbrParams, cbr, kaiming, linear, make_cbr
from .tensor import (
    ShapeError,
    Tensor,
    l2_normalize,
    repeat_lastdim,
    reshape,
    tsum,
)

__all__ = ["AvgaParams", "make_avga", "avga_forward", "fused_add_forward"]


@dataclass
class AvgaParams:
    audio_proj: Tensor  # [C, C] cast onto the stage's channel space
    audio_bias: Tensor
    consolidate: CbrParams  # 3x3 shape-preserving
    groups: int


def make_avga(rng: np.random.Generator, channels: int, groups: int) -> AvgaParams:
    if channels % groups:
        raise ShapeError(f"channels {channels} not divisible by groups {groups}")
    return AvgaParams(
        audio_proj=kaiming(rng, (channels, channels), channels),
        audio_bias=Tensor(np.zeros(channels), requires_grad=True),
        consolidate=make_cbr(rng, 3, 3, channels, channels),
        groups=groups,
    )


def _check_frames(feat: Tensor, audio: Tensor) -> None:
    if feat.ndim != 4 or audio.ndim != 2 or feat.shape[3] != audio.shape[1]:
        raise ShapeError(f"expected features [T,h,w,C] and audio [T,C], got {feat.shape}, {audio.shape}")
    if feat.shape[0] != audio.shape[0]:
        raise ShapeError(f"frame counts disagree: visual {feat.shape[0]}, audio {audio.shape[0]}")


def avga_forward(feat: Tensor, audio: Tensor, params: AvgaParams):
    """Returns the modulated feature [T,h,w,C] and the cosine maps [T,h,w,g]."""
    _check_frames(feat, audio)
    t, h, w, c = feat.shape
    g = params.groups
    dg = c // g

    projected = linear(audio, params.audio_proj, params.audio_bias)
    pixel_groups = reshape(feat, (t, h, w, g, dg))
    audio_groups = reshape(projected, (t, 1, 1, g, dg))
    att = tsum(l2_normalize(pixel_groups, -1) * l2_normalize(audio_groups, -1), axis=-1)

    modulated = feat * repeat_lastdim(att, dg) + feat
    return cbr(modulated, params.consolidate), att


def fused_add_forward(feat: Tensor, audio: Tensor, params: AvgaParams) -> Tensor:
    """Plain fusion baseline: broadcast-add the projected audio, no attention."""
    _check_frames(feat, audio)
    t, _, _, c = feat.shape
    projected = linear(audio, params.audio_proj, params.audio_bias)
    return cbr(feat + reshape(projected, (t, 1, 1, c)), params.consolidate)
