"""Semantic fusion for low-resolution stages: cross-modal channel gating,
multi-scale depthwise-separable extraction, SE + spatial attention and a
gamma-scaled residual."""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import FusionError
from .nn import Conv2d, Module, SpatialAttention, ThermalProjection
from .tensor import Parameter, Tensor

GAMMA_INIT = 0.1


class DepthwiseSeparable(Module):
    def __init__(self, c: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.dw = Conv2d(c, c, k, rng, groups=c)
        self.pw = Conv2d(c, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.pw(self.dw(x))


class SemFusion(Module):
    def __init__(self, rgb_c: int, ir_c: int, rng: np.random.Generator):
        super().__init__()
        c = rgb_c
        self.proj = ThermalProjection(ir_c, c, rng)
        self.gate_fc1 = Conv2d(2 * c, max(c // 2, 1), 1, rng)
        self.gate_fc2 = Conv2d(max(c // 2, 1), 2 * c, 1, rng)
        self.ms3 = DepthwiseSeparable(c, 3, rng)
        self.ms5 = DepthwiseSeparable(c, 5, rng)
        self.merge = Conv2d(2 * c, c, 1, rng)
        self.se_fc1 = Conv2d(c, max(c // 8, 1), 1, rng)
        self.se_fc2 = Conv2d(max(c // 8, 1), c, 1, rng)
        self.sa = SpatialAttention(7, rng)
        self.tail = Conv2d(c, c, 3, rng)
        self.gamma = Parameter(np.full(1, GAMMA_INIT, dtype=np.float32))

    def forward(self, r: Tensor, t: Tensor) -> Tensor:
        return sem_fuse(r, t, self)


def gates(r: Tensor, tp: Tensor, state: SemFusion):
    """Independent sigmoid gates (g_rgb, g_ir), each (n, C, 1, 1)."""
    pooled = ops.concat([ops.global_avg_pool(r), ops.global_avg_pool(tp)], axis=1)
    g = ops.sigmoid(state.gate_fc2(ops.relu(state.gate_fc1(pooled))))
    c = r.shape[1]
    return ops.split_channels(g, (c, c))


def cross_modal_gate(r: Tensor, tp: Tensor, state: SemFusion) -> Tensor:
    if r.shape != tp.shape:
        raise FusionError(f"cross_modal_gate: shapes {r.shape} and {tp.shape} differ")
    g_rgb, g_ir = gates(r, tp, state)
    return g_rgb * r + g_ir * tp


def multi_scale_extract(f_gated: Tensor, state: SemFusion) -> Tensor:
    return state.merge(ops.concat([state.ms3(f_gated), state.ms5(f_gated)], axis=1))


def channel_attention(x: Tensor, state: SemFusion) -> Tensor:
    w = ops.sigmoid(state.se_fc2(ops.relu(state.se_fc1(ops.global_avg_pool(x)))))
    return x * w


def refinement(f_ms: Tensor, state: SemFusion) -> Tensor:
    """tail(SA(CA(F_ms))), the branch that gamma scales."""
    return state.tail(state.sa(channel_attention(f_ms, state)))


def refine_attention(f_gated: Tensor, f_ms: Tensor, state: SemFusion) -> Tensor:
    if f_gated.shape != f_ms.shape:
        raise FusionError(f"refine_attention: shapes {f_gated.shape} and {f_ms.shape} differ")
    return f_gated + state.gamma.reshape(1, 1, 1, 1) * refinement(f_ms, state)


def sem_fuse(r: Tensor, t: Tensor, state: SemFusion) -> Tensor:
    if r.shape[0] != t.shape[0] or r.shape[2:] != t.shape[2:]:
        raise FusionError(f"sem_fuse: RGB {r.shape} and thermal {t.shape} are not aligned")
    tp = state.proj(t)
    f_gated = cross_modal_gate(r, tp, state)
    f_ms = multi_scale_extract(f_gated, state)
    return refine_attention(f_gated, f_ms, state)
