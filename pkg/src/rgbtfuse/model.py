"""Dual-encoder RGB-thermal segmenter with stage-dependent fusion."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .decoder import Decoder, DecoderConfig, DecoderOutput, decoder_param_count
from .encoder import EncoderConfig, build_dual_encoders, encoder_param_count
from .errors import ConfigError
from .freq_fusion import FreqFusion
from .nn import Module
from .sem_fusion import SemFusion
from .tensor import Tensor

FUSION_MODES = ("freq", "sem")


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 8
    num_classes: int = 5
    blocks_per_stage: int = 1
    fusion: tuple = ("freq", "freq", "sem", "sem")
    decoder: str = "panet"
    deep_supervision: bool = True
    use_thermal: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fusion", tuple(self.fusion))
        if len(self.fusion) != 4 or any(m not in FUSION_MODES for m in self.fusion):
            raise ConfigError(f"fusion must list four modes from {FUSION_MODES}, got {self.fusion}")
        if self.base_width < 1 or self.num_classes < 2:
            raise ConfigError("base_width must be >= 1 and num_classes >= 2")

    @property
    def rgb_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.base_width, self.blocks_per_stage, 3)

    @property
    def ir_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.base_width, self.blocks_per_stage, 1)

    @property
    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.rgb_encoder.widths, self.num_classes, self.decoder, self.deep_supervision)

    def variant(self, name: str) -> "ModelConfig":
        """Ablation variants: full, all_freq, no_deepsup, fpn, rgb_only."""
        if name == "full":
            return self
        if name == "all_freq":
            return replace(self, fusion=("freq",) * 4)
        if name == "no_deepsup":
            return replace(self, deep_supervision=False)
        if name == "fpn":
            return replace(self, decoder="fpn", deep_supervision=False)
        if name == "rgb_only":
            return replace(self, use_thermal=False)
        raise ConfigError(f"unknown ablation variant {name!r}")


class RGBTSegmenter(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc_rng, fuse_rng, dec_rng = rng.spawn(3)
        self.rgb_encoder, self.ir_encoder = build_dual_encoders(cfg.rgb_encoder, cfg.ir_encoder, enc_rng)
        widths = cfg.rgb_encoder.widths
        self.fusions = [
            (FreqFusion if mode == "freq" else SemFusion)(c, c, r)
            for mode, c, r in zip(cfg.fusion, widths, fuse_rng.spawn(4))
        ]
        self.decoder = Decoder(cfg.decoder_config, dec_rng)

    def fuse(self, rgb: Tensor, ir: Tensor) -> list:
        if rgb.shape[0] != ir.shape[0] or rgb.shape[2:] != ir.shape[2:]:
            raise ConfigError(f"RGB {rgb.shape} and thermal {ir.shape} inputs are not aligned")
        if not self.cfg.use_thermal:
            ir = Tensor(np.zeros(ir.shape, dtype=ir.dtype))
        rs = self.rgb_encoder(rgb)
        ts = self.ir_encoder(ir)
        return [fusion(r, t) for fusion, r, t in zip(self.fusions, rs, ts)]

    def forward(self, rgb: Tensor, ir: Tensor) -> DecoderOutput:
        fused = self.fuse(rgb, ir)
        return self.decoder(fused, rgb.shape[2], rgb.shape[3])

    def predict(self, rgb: Tensor, ir: Tensor) -> Tensor:
        """Main logits only, regardless of mode."""
        return self.forward(rgb, ir).logits


def freq_fusion_param_count(c: int) -> int:
    h = max(c // 4, 1)
    return ((c * c + c + 2 * c) + (2 * 49 + 1) + (2 * 9 + 1) + (2 * c * c + c)
            + (c * h + h) + (h + 1) + (9 * 2 * c * c + c) + 2 * c + (9 * c * c + c))


def sem_fusion_param_count(c: int) -> int:
    g, s = max(c // 2, 1), max(c // 8, 1)
    return ((c * c + c + 2 * c) + (2 * c * g + g) + (g * 2 * c + 2 * c)
            + (9 * c + c + c * c + c) + (25 * c + c + c * c + c) + (2 * c * c + c)
            + (c * s + s) + (s * c + c) + (2 * 49 + 1) + (9 * c * c + c) + 1)


def model_param_count(cfg: ModelConfig) -> int:
    """Closed-form count, independent of the module tree."""
    total = encoder_param_count(cfg.rgb_encoder) + encoder_param_count(cfg.ir_encoder)
    for mode, c in zip(cfg.fusion, cfg.rgb_encoder.widths):
        total += freq_fusion_param_count(c) if mode == "freq" else sem_fusion_param_count(c)
    return total + decoder_param_count(cfg.decoder_config)
