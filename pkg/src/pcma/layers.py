"""Shared building blocks: CBR stacks, token normalization, linear maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, conv2d, relu, sqrt, tmean

__all__ = ["CbrParams", "make_cbr", "cbr", "channel_norm", "token_norm", "linear", "kaiming"]

NORM_EPS = 1e-5


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Fan-in scaled normal init for conv kernels and linear maps."""
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


@dataclass
class CbrParams:
    """Convolution + per-channel affine normalization + ReLU."""

    kernel: Tensor
    scale: Tensor
    shift: Tensor
    stride: int = 1
    padding: int = 0


def make_cbr(rng, kh: int, kw: int, cin: int, cout: int, stride: int = 1) -> CbrParams:
    padding = (kh - 1) // 2 if stride == 1 else 0
    return CbrParams(
        kernel=kaiming(rng, (kh, kw, cin, cout), kh * kw * cin),
        scale=Tensor(np.ones(cout), requires_grad=True),
        shift=Tensor(np.zeros(cout), requires_grad=True),
        stride=stride,
        padding=padding,
    )


def channel_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Normalize each channel over (frames, height, width), then affine.

    Stands in for batch statistics, which are meaningless at desk-scale
    batch sizes; statistics are recomputed per forward pass.
    """
    mean = tmean(x, axis=(0, 1, 2), keepdims=True)
    centered = x - mean
    var = tmean(centered * centered, axis=(0, 1, 2), keepdims=True)
    return centered / sqrt(var + NORM_EPS) * scale + shift


def cbr(x: Tensor, p: CbrParams, activate: bool = True) -> Tensor:
    y = conv2d(x, p.kernel, stride=p.stride, padding=p.padding)
    y = channel_norm(y, p.scale, p.shift)
    return relu(y) if activate else y


def token_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-token normalization over the channel axis, then affine."""
    mean = tmean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = tmean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + NORM_EPS) * scale + shift


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out
