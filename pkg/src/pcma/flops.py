"""Exact operation-count accounting.

Attention costs use the two closed forms (token count N, channel width C,
selected query count N'):

    full multi-head attention:    4*N*C^2 + 2*N^2*C
    query-selected cross stage:   2*N*C^2 + 2*N'*C^2 + 2*N*N'*C

which coincide at N' = N, so the saving from pruning a stage is exactly
2*(N - N')*C*(C + N). Convolutions count 2*kh*kw*Cin*Cout*h*w*T each
(one multiply-accumulate = 2 FLOPs). Softmax and normalization work is
excluded from the closed-form comparison and tracked in a separate
auxiliary column. All counts are exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "msa_flops",
    "qsca_flops",
    "attention_flops",
    "conv_flops",
    "StageCost",
    "FlopsLedger",
    "ledger_for_forward",
]


def msa_flops(n_tokens: int, channels: int) -> int:
    n, c = int(n_tokens), int(channels)
    return 4 * n * c * c + 2 * n * n * c


def qsca_flops(n_tokens: int, channels: int, n_selected: int) -> int:
    n, c, ns = int(n_tokens), int(channels), int(n_selected)
    if not 0 <= ns <= n:
        raise ValueError(f"selected count {ns} outside [0, {n}]")
    return 2 * n * c * c + 2 * ns * c * c + 2 * n * ns * c


def attention_flops(n_tokens: int, channels: int, n_selected: int) -> tuple[int, int]:
    """Both closed forms at once: (full, query-selected)."""
    return msa_flops(n_tokens, channels), qsca_flops(n_tokens, channels, n_selected)


def conv_flops(kh: int, kw: int, cin: int, cout: int, h: int, w: int, t: int) -> int:
    return 2 * kh * kw * cin * cout * h * w * t


@dataclass
class StageCost:
    stage: int
    n_tokens: int
    n_selected: int
    attention: int

    @property
    def ratio(self) -> float:
        return self.n_selected / self.n_tokens if self.n_tokens else 0.0


@dataclass
class FlopsLedger:
    channels: int = 0
    attention: int = 0
    convolution: int = 0
    elementwise: int = 0
    auxiliary: int = 0
    stages: list[StageCost] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.attention + self.convolution + self.elementwise

    def add_stage(self, stage: int, n_tokens: int, n_selected: int) -> None:
        cost = qsca_flops(n_tokens, self.channels, n_selected)
        self.stages.append(StageCost(stage, n_tokens, n_selected, cost))
        self.attention += cost

    def as_dict(self) -> dict:
        return {
            "attention": self.attention,
            "convolution": self.convolution,
            "elementwise": self.elementwise,
            "auxiliary": self.auxiliary,
            "total": self.total,
            "stages": [
                {
                    "stage": s.stage,
                    "n_tokens": s.n_tokens,
                    "n_selected": s.n_selected,
                    "ratio": s.ratio,
                    "attention": s.attention,
                }
                for s in self.stages
            ],
        }


def _conv_cost_for_config(config) -> tuple[int, int]:
    """(convolution, elementwise) counts for one forward pass of a config."""
    t, c = config.frames, config.channels
    ec = config.stage_channels
    res = config.stage_resolutions()
    gated = config.cross_attention_active
    conv = conv_flops(4, 4, 3, ec[0], *res[0], t)
    for i in range(1, 4):
        conv += conv_flops(2, 2, ec[i - 1], ec[i], *res[i], t)
    elementwise = 0
    for i in range(4):
        h, w = res[i]
        conv += conv_flops(1, 1, ec[i], c, h, w, t)  # channel unification
        conv += conv_flops(3, 3, c, c, h, w, t)  # group-attention consolidation
        fusion_cbrs = 3 if gated else 2  # lateral, fuse, and the gate when guided
        conv += fusion_cbrs * conv_flops(3, 3, c, c, h, w, t)
        conv += conv_flops(1, 1, c, 1, h, w, t)  # predict head
        # residual adds, attention-map modulation, gating
        elementwise += (5 if gated else 3) * t * h * w * c
    return conv, elementwise


def ledger_for_forward(config, masks: dict[int, np.ndarray] | None) -> FlopsLedger:
    """Account one forward pass given the masks the attention stages used.

    ``masks`` maps stage index to the binary mask consumed by that stage's
    cross-attention (stage 4 uses all-ones); None means cross-attention was
    disabled for the run, leaving the attention column empty.
    """
    ledger = FlopsLedger(channels=config.channels)
    ledger.convolution, ledger.elementwise = _conv_cost_for_config(config)
    if masks is not None:
        t = config.frames
        for stage, (h, w) in zip((1, 2, 3, 4), config.stage_resolutions()):
            mask = masks.get(stage)
            if mask is None:
                continue
            n = t * h * w
            n_sel = int(np.asarray(mask).sum())
            ledger.add_stage(stage, n, n_sel)
            # softmax rows for both branches, plus pre-attention token norms
            ledger.auxiliary += 5 * (t * n + n_sel * t) + 8 * (n + t) * config.channels
    ledger.stages.sort(key=lambda s: s.stage)
    return ledger
