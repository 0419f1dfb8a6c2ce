"""Guided-fusion decoding and full-network assembly.

Each stage fuses the lateral feature with the upsampled deeper decoder
feature (FPN style), gates the result with the cross-attention guidance,
and emits a one-channel logit map. The assembly runs stages deep to
shallow: group attention, query-selected cross-attention, guided fusion,
then confidence masking for the next stage.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import flops as flops_mod
from .cross_attention import QscaParams, make_qsca, qsca_forward
from .encoder import EncoderParams, encode_audio, encode_visual, make_encoder
from .group_attention import AvgaParams, avga_forward, fused_add_forward, make_avga
from .layers import CbrParams, cbr, kaiming, make_cbr
from .masking import all_ones_mask, cim_step, remaining_ratio, switch, upsample_mask2x
from .tensor import ShapeError, Tensor, conv2d, sigmoid, upsample_nearest2x

__all__ = ["GfParams", "gf_forward", "NetworkConfig", "NetworkParams", "Network",
           "make_gf", "init_network", "ForwardResult", "ABLATION_MODES"]


@dataclass
class GfParams:
    lateral: CbrParams
    fuse: CbrParams
    gate: CbrParams  # conv + norm, no ReLU: feeds a sigmoid
    head: Tensor  # [1, 1, C, 1]


def make_gf(rng: np.random.Generator, channels: int) -> GfParams:
    return GfParams(
        lateral=make_cbr(rng, 3, 3, channels, channels),
        fuse=make_cbr(rng, 3, 3, channels, channels),
        gate=make_cbr(rng, 3, 3, channels, channels),
        head=kaiming(rng, (1, 1, channels, 1), channels),
    )


def gf_forward(lateral: Tensor, deeper: Tensor | None, guidance: Tensor | None,
               params: GfParams):
    """One fusion stage; ``deeper`` is absent exactly at the deepest stage.

    Returns (decoder feature, logit map). With guidance g the fused input
    is U * sigmoid(gate(g)) + U; without cross-attention the gate branch is
    skipped and the stage degrades to plain FPN fusion.
    """
    if deeper is not None:
        t, h, w, _ = lateral.shape
        if deeper.shape[0] != t or deeper.shape[1] * 2 != h or deeper.shape[2] * 2 != w:
            raise ShapeError(f"deeper feature {deeper.shape} does not align with lateral {lateral.shape}")
        u = cbr(lateral + upsample_nearest2x(deeper), params.lateral)
    else:
        u = cbr(lateral, params.lateral)
    if guidance is not None:
        gate = sigmoid(cbr(guidance, params.gate, activate=False))
        feat = cbr(u * gate + u, params.fuse)
    else:
        feat = cbr(u, params.fuse)
    logits = conv2d(feat, params.head)
    return feat, logits


@dataclass
class NetworkConfig:
    """Architecture and supervision settings; defaults follow the reference
    operating point (C=256, g=8, c=0.99, unit loss weights)."""

    channels: int = 256
    groups: int = 8
    heads: int = 8
    confidence: float = 0.99
    frames: int = 2
    height: int = 64
    width: int = 64
    audio_dim: int = 128
    encoder_channels: tuple[int, int, int, int] | None = None
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    use_avga: bool = True
    use_mask: bool = True
    use_audio_interaction: bool = True
    use_progression: bool = True

    def __post_init__(self):
        if self.channels % self.groups:
            raise ValueError(f"channels {self.channels} not divisible by groups {self.groups}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.height % 32 or self.width % 32:
            raise ValueError(f"input extent {self.height}x{self.width} must be divisible by 32")
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"confidence threshold {self.confidence} outside (0, 1]")
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights needs exactly four entries")
        self.loss_weights = tuple(float(x) for x in self.loss_weights)
        if self.encoder_channels is not None:
            self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
            if len(self.encoder_channels) != 4:
                raise ValueError("encoder_channels needs exactly four entries")

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        if self.encoder_channels is not None:
            return self.encoder_channels
        c = self.channels
        return (max(8, c // 8), max(8, c // 4), max(8, c // 2), c)

    def stage_resolutions(self) -> list[tuple[int, int]]:
        return [(self.height // 2 ** (i + 1), self.width // 2 ** (i + 1)) for i in range(1, 5)]

    @property
    def cross_attention_active(self) -> bool:
        # Interaction or masking each imply the cross-attention stage exists;
        # with both off the pipeline degrades to the fusion-only baseline.
        return self.use_mask or self.use_audio_interaction

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# Module toggles for the six runnable ablation modes.
ABLATION_MODES = {
    "m0": dict(use_avga=False, use_mask=False, use_audio_interaction=False, use_progression=False),
    "m1": dict(use_avga=True, use_mask=False, use_audio_interaction=False, use_progression=False),
    "m2": dict(use_avga=True, use_mask=False, use_audio_interaction=True, use_progression=False),
    "m3": dict(use_avga=True, use_mask=True, use_audio_interaction=True, use_progression=False),
    "m4": dict(use_avga=True, use_mask=True, use_audio_interaction=False, use_progression=True),
    "m5": dict(use_avga=True, use_mask=True, use_audio_interaction=True, use_progression=True),
}


@dataclass
class NetworkParams:
    encoder: EncoderParams
    group_attention: list[AvgaParams]  # stage 1..4
    cross_attention: list[QscaParams]
    fusion: list[GfParams]

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def walk(prefix, obj):
            if isinstance(obj, Tensor):
                out[prefix] = obj
            elif isinstance(obj, list):
                for i, item in enumerate(obj):
                    walk(f"{prefix}{i + 1}", item)
            elif hasattr(obj, "__dataclass_fields__"):
                for f in fields(obj):
                    v = getattr(obj, f.name)
                    if isinstance(v, (Tensor, list)) or hasattr(v, "__dataclass_fields__"):
                        walk(f"{prefix}.{f.name}" if prefix else f.name, v)

        walk("encoder", self.encoder)
        walk("group_attention", self.group_attention)
        walk("cross_attention", self.cross_attention)
        walk("fusion", self.fusion)
        return out


def init_network(config: NetworkConfig, seed: int) -> NetworkParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    c = config.channels
    return NetworkParams(
        encoder=make_encoder(rng, config.stage_channels, c, config.audio_dim),
        group_attention=[make_avga(rng, c, config.groups) for _ in range(4)],
        cross_attention=[make_qsca(rng, c, config.heads) for _ in range(4)],
        fusion=[make_gf(rng, c) for _ in range(4)],
    )


@dataclass
class ForwardResult:
    outputs: list[Tensor]  # logit maps O1..O4 at stage resolutions
    masks: dict[int, np.ndarray]  # mask consumed by each stage's attention
    audio_feats: list[Tensor]  # refreshed audio after stages 4..1
    stage_tokens: list[tuple[int, int]]  # (N, N') per stage 1..4
    ledger: flops_mod.FlopsLedger

    @property
    def prediction(self) -> np.ndarray:
        from .tensor import _sigmoid_stable

        return _sigmoid_stable(self.outputs[0].data)

    def remaining_ratios(self) -> dict[int, float]:
        return {i: remaining_ratio(self.masks[i]) for i in (1, 2, 3) if i in self.masks}


class Network:
    """End-to-end assembly: encoders, per-stage attention, fused decoding."""

    def __init__(self, config: NetworkConfig, params: NetworkParams):
        self.config = config
        self.params = params

    def forward(self, frames: Tensor, audio: Tensor) -> ForwardResult:
        cfg = self.config
        pyramid = encode_visual(frames, self.params.encoder)
        audio_base = encode_audio(audio, self.params.encoder)
        resolutions = cfg.stage_resolutions()

        outputs: dict[int, Tensor] = {}
        masks: dict[int, np.ndarray] = {}
        audio_feats: list[Tensor] = []
        stage_tokens: dict[int, tuple[int, int]] = {}

        t = cfg.frames
        h4, w4 = resolutions[3]
        mask = all_ones_mask(t, h4, w4)
        audio_stream = audio_base
        deeper_feat: Tensor | None = None

        for stage in (4, 3, 2, 1):
            lateral = pyramid[stage - 1]
            avga = self.params.group_attention[stage - 1]
            if cfg.use_avga:
                aligned, _ = avga_forward(lateral, audio_base, avga)
            else:
                aligned = fused_add_forward(lateral, audio_base, avga)

            guidance = None
            if cfg.cross_attention_active:
                masks[stage] = mask
                qsca = self.params.cross_attention[stage - 1]
                audio_next, guidance = qsca_forward(audio_stream, aligned, mask, qsca)
                audio_feats.append(audio_next)
                stage_tokens[stage] = (mask.size, int(mask.sum()))
                if cfg.use_audio_interaction:
                    audio_stream = audio_next
            else:
                audio_feats.append(audio_stream)

            feat, logits = gf_forward(aligned, deeper_feat, guidance, self.params.fusion[stage - 1])
            outputs[stage] = logits
            deeper_feat = feat

            if stage > 1:
                if cfg.use_mask:
                    if cfg.use_progression:
                        mask = cim_step(mask, logits.detach(), cfg.confidence)
                    else:
                        mask = upsample_mask2x(switch(logits.detach(), cfg.confidence))
                else:
                    h_next, w_next = resolutions[stage - 2]
                    mask = all_ones_mask(t, h_next, w_next)

        ledger = flops_mod.ledger_for_forward(cfg, masks if cfg.cross_attention_active else None)
        return ForwardResult(
            outputs=[outputs[i] for i in (1, 2, 3, 4)],
            masks=masks,
            audio_feats=audio_feats,
            stage_tokens=[stage_tokens.get(i, (0, 0)) for i in (1, 2, 3, 4)],
            ledger=ledger,
        )
