"""Frequency-based fusion for high-resolution stages.

Thermal features are projected to the RGB width, split into a Gaussian
low-pass band and its residual high-pass band, each band is re-weighted by its
own spatial attention mask, a channel gate blends the bands, and the result
corrects the RGB features through an ungated residual.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import FusionError
from .nn import BatchNorm2d, Conv2d, Module, SpatialAttention, ThermalProjection
from .tensor import Tensor

BLUR_KERNEL = 7
BLUR_SIGMA = 2.0

# bands are carried one precision step wider so that low + high == input exactly
_WIDER = {np.dtype(np.float16): np.float32, np.dtype(np.float32): np.float64}


class FreqFusion(Module):
    def __init__(self, rgb_c: int, ir_c: int, rng: np.random.Generator):
        super().__init__()
        c = rgb_c
        self.proj = ThermalProjection(ir_c, c, rng)
        self.attn_low = SpatialAttention(7, rng)
        self.attn_high = SpatialAttention(3, rng)
        self.gate = Conv2d(2 * c, c, 1, rng)
        hidden = max(c // 4, 1)
        self.conf1 = Conv2d(c, hidden, 1, rng)
        self.conf2 = Conv2d(hidden, 1, 1, rng)
        self.refine1 = Conv2d(2 * c, c, 3, rng)
        self.refine_bn = BatchNorm2d(c)
        # zero tail: the module starts as the identity on the RGB stream
        self.refine2 = Conv2d(c, c, 3, rng, zero_init=True)

    def forward(self, r: Tensor, t: Tensor) -> Tensor:
        return freq_fuse(r, t, self)


def _check_same(a: Tensor, b: Tensor, what: str, spatial_only: bool = False):
    sa, sb = (a.shape[2:], b.shape[2:]) if spatial_only else (a.shape, b.shape)
    if a.shape[0] != b.shape[0] or sa != sb:
        raise FusionError(f"{what}: shapes {a.shape} and {b.shape} are not aligned")


def project_thermal(t: Tensor, state: FreqFusion, r: Tensor | None = None) -> Tensor:
    if r is not None:
        _check_same(r, t, "project_thermal", spatial_only=True)
    return state.proj(t)


def frequency_decompose(tp: Tensor, k: int = BLUR_KERNEL, sigma: float = BLUR_SIGMA):
    """Return ``(low, high)`` with ``low = blur(tp)`` and ``high = tp - low``.

    For float32 input both bands are returned in float64: ``low`` is the
    float32 blur widened exactly, and ``high`` is then an exact difference, so
    ``low + high`` reproduces ``tp`` bit for bit. This holds while an element
    and its blurred value are within about 2**28 of each other in magnitude;
    beyond that no pair of floats near (blur, residual) can sum to it exactly.
    """
    low = ops.depthwise_gaussian_blur(tp, k, sigma)
    wide = _WIDER.get(np.dtype(tp.dtype))
    if wide is not None:
        low = ops.cast(low, wide)
        tp = ops.cast(tp, wide)
    return low, tp - low


def dual_branch_attention(t_low: Tensor, t_high: Tensor, state: FreqFusion):
    _check_same(t_low, t_high, "dual_branch_attention")
    return state.attn_low(t_low), state.attn_high(t_high)


def adaptive_frequency_gate(a_low: Tensor, a_high: Tensor, state: FreqFusion) -> Tensor:
    _check_same(a_low, a_high, "adaptive_frequency_gate")
    pooled = ops.global_avg_pool(ops.abs(ops.concat([a_low, a_high], axis=1)))
    alpha = ops.sigmoid(state.gate(pooled))
    return alpha * a_low + (1.0 - alpha) * a_high


def confidence(r: Tensor, state: FreqFusion) -> Tensor:
    """Per-sample RGB reliability s, shape (n, 1, 1, 1)."""
    return ops.sigmoid(state.conf2(ops.relu(state.conf1(ops.global_avg_pool(r)))))


def refine(x: Tensor, state: FreqFusion) -> Tensor:
    return state.refine2(ops.gelu(state.refine_bn(state.refine1(x))))


def safe_residual_fuse(r: Tensor, t_final: Tensor, state: FreqFusion) -> Tensor:
    _check_same(r, t_final, "safe_residual_fuse")
    s = confidence(r, state)
    return r + refine(ops.concat([s * r, t_final], axis=1), state)


def freq_fuse(r: Tensor, t: Tensor, state: FreqFusion) -> Tensor:
    tp = project_thermal(t, state, r)
    _check_same(r, tp, "freq_fuse")
    t_low, t_high = frequency_decompose(tp)
    if t_low.dtype != r.dtype:
        t_low, t_high = ops.cast(t_low, r.dtype), ops.cast(t_high, r.dtype)
    a_low, a_high = dual_branch_attention(t_low, t_high, state)
    t_final = adaptive_frequency_gate(a_low, a_high, state)
    return safe_residual_fuse(r, t_final, state)
