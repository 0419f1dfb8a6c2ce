"""Trainable stand-in backbones: a strided-conv pyramid for frames and a
linear map for audio descriptors.

Stage i of the pyramid lands at resolution (H, W) / 2^(i+1): a 4x4/stride-4
stem produces stage 1 and three 2x2/stride-2 convolutions produce stages
2..4, after which 1x1 CBRs unify every stage to the shared channel width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import CbrParams, cbr, kaiming, linear, make_cbr
from .tensor import ShapeError, Tensor

__all__ = ["EncoderParams", "make_encoder", "encode_visual", "encode_audio"]


@dataclass
class EncoderParams:
    stem: CbrParams
    stages: list[CbrParams]  # three stride-2 blocks
    unify: list[CbrParams]  # four 1x1 blocks onto the shared width
    audio_weight: Tensor
    audio_bias: Tensor
    stage_channels: tuple[int, int, int, int] = field(default=(32, 64, 128, 256))


def make_encoder(rng: np.random.Generator, stage_channels, out_channels: int,
                 audio_dim: int) -> EncoderParams:
    c1, c2, c3, c4 = stage_channels
    return EncoderParams(
        stem=make_cbr(rng, 4, 4, 3, c1, stride=4),
        stages=[
            make_cbr(rng, 2, 2, c1, c2, stride=2),
            make_cbr(rng, 2, 2, c2, c3, stride=2),
            make_cbr(rng, 2, 2, c3, c4, stride=2),
        ],
        unify=[make_cbr(rng, 1, 1, c, out_channels) for c in (c1, c2, c3, c4)],
        audio_weight=kaiming(rng, (audio_dim, out_channels), audio_dim),
        audio_bias=Tensor(np.zeros(out_channels), requires_grad=True),
        stage_channels=tuple(stage_channels),
    )


def encode_visual(frames: Tensor, params: EncoderParams) -> list[Tensor]:
    """Build the four-stage feature pyramid from [T, H, W, 3] frames."""
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ShapeError(f"expected frames [T, H, W, 3], got {frames.shape}")
    _, h, w, _ = frames.shape
    if h % 32 or w % 32:
        raise ShapeError(f"frame extent {h}x{w} must be divisible by 32")
    x = cbr(frames, params.stem)
    raw = [x]
    for stage in params.stages:
        x = cbr(x, stage)
        raw.append(x)
    return [cbr(f, u) for f, u in zip(raw, params.unify)]


def encode_audio(audio: Tensor, params: EncoderParams) -> Tensor:
    """Affine map of per-frame audio descriptors onto the shared width."""
    if audio.ndim != 2 or audio.shape[1] != params.audio_weight.shape[0]:
        raise ShapeError(
            f"expected audio [T, {params.audio_weight.shape[0]}], got {audio.shape}"
        )
    return linear(audio, params.audio_weight, params.audio_bias)
