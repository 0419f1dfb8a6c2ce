"""Query-selected cross-attention between audio and visual tokens.

Two pre-norm multi-head cross-attention branches with residuals:

* audio branch: queries are the T audio tokens, keys/values all T*h*w
  visual tokens; the result updates the audio stream for the next stage.
* visual branch: queries are only the visual tokens the mask marks as
  unconfident; keys/values are the audio tokens. Updated tokens are
  scattered back into place and every masked-out position passes the
  input feature through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import kaiming, token_norm
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    bmm,
    gather_rows,
    matmul,
    reshape,
    scatter_rows,
    softmax_lastdim,
    transpose,
)

__all__ = ["QscaParams", "make_qsca", "attention", "qsca_forward"]


@dataclass
class BranchParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class QscaParams:
    audio_branch: BranchParams  # audio queries attend over visual tokens
    visual_branch: BranchParams  # selected visual queries attend over audio
    norm_audio_scale: Tensor
    norm_audio_shift: Tensor
    norm_visual_scale: Tensor
    norm_visual_shift: Tensor
    heads: int


def _branch(rng, c: int) -> BranchParams:
    return BranchParams(*(kaiming(rng, (c, c), c) for _ in range(4)))


def make_qsca(rng: np.random.Generator, channels: int, heads: int) -> QscaParams:
    if channels % heads:
        raise ShapeError(f"channels {channels} not divisible by heads {heads}")
    return QscaParams(
        audio_branch=_branch(rng, channels),
        visual_branch=_branch(rng, channels),
        norm_audio_scale=Tensor(np.ones(channels), requires_grad=True),
        norm_audio_shift=Tensor(np.zeros(channels), requires_grad=True),
        norm_visual_scale=Tensor(np.ones(channels), requires_grad=True),
        norm_visual_shift=Tensor(np.zeros(channels), requires_grad=True),
        heads=heads,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return transpose(reshape(x, (n, heads, c // heads)), (1, 0, 2))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, out_proj: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention with heads concatenated afterwards.

    q: [nq, C]; k, v: [nk, C]. Scale is 1/sqrt(d_k) with d_k = C/heads.
    ``out_proj`` applies the output projection when supplied.
    """
    nq, c = q.shape
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    if k.shape != v.shape or k.shape[1] != c:
        raise ShapeError(f"key/value shapes disagree with queries: {q.shape}, {k.shape}, {v.shape}")
    d_k = c // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    weights = softmax_lastdim(bmm(qh, transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(d_k)))
    mixed = bmm(weights, vh)  # [heads, nq, d_k]
    merged = reshape(transpose(mixed, (1, 0, 2)), (nq, c))
    return matmul(merged, out_proj) if out_proj is not None else merged


def _project(x: Tensor, w: Tensor) -> Tensor:
    return matmul(x, w)


def qsca_forward(audio: Tensor, visual: Tensor, mask, params: QscaParams):
    """Run both branches for one stage.

    audio: [T, C]; visual: [T, h, w, C]; mask: binary [T, h, w] (1 keeps a
    pixel as a query). Returns (audio_out [T, C], visual_out [T, h, w, C]).
    The deepest stage passes an all-ones mask; an all-zero mask skips the
    visual branch entirely and passes the visual feature through.
    """
    if audio.ndim != 2 or visual.ndim != 4 or visual.shape[3] != audio.shape[1]:
        raise ShapeError(f"expected audio [T,C] and visual [T,h,w,C], got {audio.shape}, {visual.shape}")
    t, h, w, c = visual.shape
    if audio.shape[0] != t:
        raise ShapeError(f"frame counts disagree: audio {audio.shape[0]}, visual {t}")
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != (t, h, w):
        raise ShapeError(f"mask shape {m.shape} does not match visual {visual.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ContractError("confidence mask must be binary")

    tokens = reshape(visual, (t * h * w, c))
    norm_tokens = token_norm(tokens, params.norm_visual_scale, params.norm_visual_shift)
    norm_audio = token_norm(audio, params.norm_audio_scale, params.norm_audio_shift)

    ab = params.audio_branch
    audio_attended = attention(
        _project(norm_audio, ab.w_q),
        _project(norm_tokens, ab.w_k),
        _project(norm_tokens, ab.w_v),
        params.heads,
        out_proj=ab.w_o,
    )
    audio_out = audio + audio_attended

    flat_mask = m.reshape(-1)
    if not flat_mask.any():
        return audio_out, visual

    vb = params.visual_branch
    selected_norm, idx = gather_rows(norm_tokens, flat_mask)
    selected_raw = gather_rows(tokens, flat_mask)[0]
    visual_attended = attention(
        _project(selected_norm, vb.w_q),
        _project(norm_audio, vb.w_k),
        _project(norm_audio, vb.w_v),
        params.heads,
        out_proj=vb.w_o,
    )
    updated = selected_raw + visual_attended
    merged = scatter_rows(updated, idx, tokens)
    return audio_out, reshape(merged, (t, h, w, c))
