"""Toy four-stage hierarchical encoder with ConvNeXt-shaped blocks.

Stage i has width ``base_width * 2**(i-1)`` and stride ``4 * 2**(i-1)``.
BatchNorm stands in for ConvNeXt's LayerNorm and GRN is omitted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    base_width: int = 8
    blocks_per_stage: int = 1
    in_channels: int = 3

    @property
    def widths(self) -> tuple:
        c = self.base_width
        return (c, 2 * c, 4 * c, 8 * c)


class FeaturePyramid(NamedTuple):
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor


class ConvNeXtBlock(Module):
    """7x7 depthwise -> norm -> 1x1 expand (4x) -> GELU -> 1x1 project, plus residual."""

    def __init__(self, c: int, rng: np.random.Generator):
        super().__init__()
        self.dw = Conv2d(c, c, 7, rng, groups=c)
        self.norm = BatchNorm2d(c)
        self.pw1 = Conv2d(c, 4 * c, 1, rng)
        self.pw2 = Conv2d(4 * c, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.pw2(ops.gelu(self.pw1(self.norm(self.dw(x)))))
        return x + y


class Stage(Module):
    def __init__(self, in_c: int, out_c: int, blocks: int, rng: np.random.Generator, stem: bool):
        super().__init__()
        if stem:
            # patchify stem: 4x4 stride 4, then norm
            self.down = Conv2d(in_c, out_c, 4, rng, stride=4, padding=0)
            self.norm = BatchNorm2d(out_c)
        else:
            self.norm = BatchNorm2d(in_c)
            self.down = Conv2d(in_c, out_c, 2, rng, stride=2, padding=0)
        self.stem = stem
        self.blocks = [ConvNeXtBlock(out_c, rng) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm(self.down(x)) if self.stem else self.down(self.norm(x))
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        ins = (cfg.in_channels,) + widths[:-1]
        self.stages = [Stage(ins[i], widths[i], cfg.blocks_per_stage, rng, stem=(i == 0))
                       for i in range(4)]

    def forward(self, image: Tensor) -> FeaturePyramid:
        return encode(self, image)


def encode(enc: Encoder, image: Tensor) -> FeaturePyramid:
    n, c, h, w = image.shape
    if c != enc.cfg.in_channels:
        raise ConfigError(f"encoder expects {enc.cfg.in_channels} input channels, got {c}")
    if h % 32 or w % 32:
        raise ConfigError(f"input spatial size {h}x{w} must be divisible by 32")
    feats = []
    x = image
    for stage in enc.stages:
        x = stage(x)
        feats.append(x)
    return FeaturePyramid(*feats)


def build_dual_encoders(rgb_cfg: EncoderConfig, ir_cfg: EncoderConfig,
                        rng: np.random.Generator) -> tuple:
    """Structurally identical encoders with independently drawn weights."""
    if rgb_cfg.base_width != ir_cfg.base_width or rgb_cfg.blocks_per_stage != ir_cfg.blocks_per_stage:
        raise ConfigError("RGB and thermal encoders must share stage topology")
    rgb_rng, ir_rng = rng.spawn(2)
    return Encoder(rgb_cfg, rgb_rng), Encoder(ir_cfg, ir_rng)


def encoder_param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count (kept independent of the module tree)."""
    w = cfg.widths
    total = cfg.in_channels * w[0] * 16 + w[0] + 2 * w[0]          # stem conv + bias + norm
    for i in range(1, 4):
        total += 2 * w[i - 1] + w[i - 1] * w[i] * 4 + w[i]           # norm + 2x2 conv
    for c in w:
        block = c * 49 + c + 2 * c + (4 * c * c + 4 * c) + (4 * c * c + c)
        total += cfg.blocks_per_stage * block
    return total
