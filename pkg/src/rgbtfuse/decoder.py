"""Bidirectional (PANet-style) pyramid decoder and its FPN ablation variant.

Pipeline: lateral 1x1 projections to a common width D = C1, a top-down
path, a bottom-up path, channel modulation by a global context vector, and
aggregation of all levels at the finest decoder resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

DEEP_WEIGHTS = (0.1, 0.2, 0.3, 0.4)
VARIANTS = ("panet", "fpn")


@dataclass(frozen=True)
class DecoderConfig:
    widths: tuple          # encoder stage widths C1..C4
    num_classes: int
    variant: str = "panet"
    deep_supervision: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"decoder variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def dim(self) -> int:
        return self.widths[0]

    @property
    def supervised(self) -> bool:
        # the FPN ablation runs without deep supervision
        return self.deep_supervision and self.variant == "panet"


class DecoderOutput(NamedTuple):
    logits: Tensor
    deep: tuple = ()
    aux: Tensor | None = None


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d, k = cfg.dim, cfg.num_classes
        self.lateral = [Conv2d(c, d, 1, rng) for c in cfg.widths]
        self.td_refine = [Conv2d(d, d, 3, rng) for _ in range(3)]       # levels 1..3
        if cfg.variant == "panet":
            self.bu_down = [Conv2d(d, d, 3, rng, stride=2, padding=1) for _ in range(3)]  # into levels 2..4
            self.bu_merge = [Conv2d(2 * d, d, 3, rng) for _ in range(3)]
            self.ctx = Conv2d(cfg.widths[3], d, 1, rng)
        self.agg1 = Conv2d(4 * d, d, 3, rng)
        self.agg1_bn = BatchNorm2d(d)
        self.agg2 = Conv2d(d, d, 3, rng)
        self.agg2_bn = BatchNorm2d(d)
        self.head = Conv2d(d, k, 1, rng)
        if cfg.supervised:
            self.deep_heads = [Conv2d(d, k, 1, rng) for _ in range(4)]
            self.aux_head = Conv2d(d, k, 1, rng)

    def forward(self, fused, out_h: int, out_w: int) -> DecoderOutput:
        lat = lateral_project(fused, self)
        td = top_down(lat, self)
        if self.cfg.variant == "fpn":
            return aggregate_and_predict(td, self, out_h, out_w)
        bu = bottom_up(td, self)
        mod = global_context_modulate(fused[3], bu, self)
        return aggregate_and_predict(mod, self, out_h, out_w)


def lateral_project(pyramid, state: Decoder) -> list:
    return [conv(f) for conv, f in zip(state.lateral, pyramid)]


def top_down(lat, state: Decoder) -> list:
    """P4 = L4; P_i = conv3(L_i + up(P_{i+1})) for i = 3, 2, 1."""
    out = [None, None, None, lat[3]]
    for i in (2, 1, 0):
        h, w = lat[i].shape[2:]
        out[i] = state.td_refine[i](lat[i] + ops.bilinear_resize(out[i + 1], h, w))
    return out


def bottom_up(td, state: Decoder) -> list:
    """P1 = P1_td; P_i = conv3([down(P_{i-1}) || P_i_td]) for i = 2, 3, 4."""
    out = [td[0]]
    for i in (1, 2, 3):
        down = state.bu_down[i - 1](out[i - 1])
        out.append(state.bu_merge[i - 1](ops.concat([down, td[i]], axis=1)))
    return out


def context_factor(f4: Tensor, state: Decoder) -> Tensor:
    """0.5 + 0.5 * sigmoid(c), shape (n, D, 1, 1), strictly inside (0.5, 1)."""
    c = state.ctx(ops.global_avg_pool(f4))
    return modulation(c)


def modulation(c: Tensor) -> Tensor:
    return 0.5 + 0.5 * ops.sigmoid(c)


def global_context_modulate(f4: Tensor, bu, state: Decoder) -> list:
    factor = context_factor(f4, state)
    return [p * factor for p in bu]


def aggregate_and_predict(levels, state: Decoder, out_h: int, out_w: int) -> DecoderOutput:
    h, w = levels[0].shape[2:]
    ups = [ops.bilinear_resize(p, h, w) for p in levels]
    x = ops.relu(state.agg1_bn(state.agg1(ops.concat(ups, axis=1))))
    x = ops.relu(state.agg2_bn(state.agg2(x)))
    logits = ops.bilinear_resize(state.head(x), out_h, out_w)
    if not (state.training and state.cfg.supervised):
        return DecoderOutput(logits)
    deep = tuple(ops.bilinear_resize(head(p), out_h, out_w) for head, p in zip(state.deep_heads, levels))
    aux = ops.bilinear_resize(state.aux_head(levels[1]), out_h, out_w)
    return DecoderOutput(logits, deep, aux)


def fpn_decode(pyramid, state: Decoder, out_h: int, out_w: int) -> Tensor:
    if state.cfg.variant != "fpn":
        raise ConfigError("fpn_decode needs a decoder built with variant='fpn'")
    return aggregate_and_predict(top_down(lateral_project(pyramid, state), state), state, out_h, out_w).logits


def decoder_param_count(cfg: DecoderConfig) -> int:
    """Closed-form parameter count."""
    d, k = cfg.dim, cfg.num_classes
    total = sum(c * d + d for c in cfg.widths)                  # lateral
    total += 3 * (9 * d * d + d)                                # top-down refine
    if cfg.variant == "panet":
        total += 3 * (9 * d * d + d)                            # bottom-up downsample
        total += 3 * (9 * 2 * d * d + d)                        # bottom-up merge
        total += cfg.widths[3] * d + d                          # context
    total += 9 * 4 * d * d + d + 2 * d + 9 * d * d + d + 2 * d  # aggregation block
    total += d * k + k                                          # head
    if cfg.supervised:
        total += 5 * (d * k + k)                                # deep heads + aux head
    return total
