"""Minimal module system: parameter discovery, train/eval mode, state dicts."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigError
from .tensor import Parameter, Tensor


class Module:
    """Container that discovers parameters, buffers and children by attribute.

    Attribute order is registration order, which fixes parameter names and
    therefore checkpoint layout.
    """

    training = True

    def __init__(self):
        self._buffer_names = []

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffer_names.append(name)
        setattr(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal ----------------------------------------------------------
    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- mode / dtype ---------------------------------------------------------
    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def to(self, dtype):
        """Cast parameters and buffers in place (used for float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in getattr(m, "_buffer_names", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- state -----------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict):
        """Copy arrays into parameters/buffers; names and shapes must match exactly."""
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = list(params) + list(buffers)
        missing = [n for n in expected if n not in state]
        unexpected = [n for n in state if n not in params and n not in buffers]
        mismatched = [n for n in expected if n in state and tuple(np.shape(state[n])) != tuple(
            (params[n].shape if n in params else buffers[n].shape))]
        if missing or unexpected or mismatched:
            parts = []
            if mismatched:
                first = mismatched[0]
                want = params[first].shape if first in params else buffers[first].shape
                parts.append(f"shape mismatch for {', '.join(mismatched)} "
                             f"(first: {first} has {tuple(np.shape(state[first]))}, model expects {tuple(want)})")
            if missing:
                parts.append(f"missing tensors: {', '.join(missing)}")
            if unexpected:
                parts.append(f"unexpected tensors: {', '.join(unexpected)}")
            raise CheckpointError("; ".join(parts))
        for n, p in params.items():
            p.data = np.array(state[n], dtype=p.dtype)
        for m_prefix, m in _modules_with_prefix(self):
            for b in getattr(m, "_buffer_names", ()):
                key = m_prefix + b
                setattr(m, b, np.array(state[key], dtype=getattr(m, b).dtype))


def _modules_with_prefix(module: Module, prefix: str = ""):
    yield prefix, module
    for name, child in module.named_children():
        yield from _modules_with_prefix(child, f"{prefix}{name}.")


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True,
                 pad_mode: str = "zero", zero_init: bool = False):
        super().__init__()
        if groups < 1 or in_c % groups or out_c % groups:
            raise ConfigError(f"channels {in_c}->{out_c} not divisible by groups={groups}")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        self.pad_mode = pad_mode
        shape = (out_c, in_c // groups, k, k)
        if zero_init:
            self.weight = Parameter(np.zeros(shape, dtype=np.float32))
        else:
            self.weight = Parameter(uniform_fan_in(rng, shape, (in_c // groups) * k * k))
        self.bias = Parameter(np.zeros(out_c, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                          pad_mode=self.pad_mode, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(c, dtype=np.float32))
        self.bias = Parameter(np.zeros(c, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.register_buffer("running_var", np.ones(c, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class SpatialAttention(Module):
    """sigmoid(conv_k(channel_pool(x))): one (n, 1, h, w) mask in (0, 1)."""

    def __init__(self, k: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(2, 1, k, rng)

    def mask(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.conv(ops.channel_pool(x)))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.mask(x)


class ThermalProjection(Module):
    """GELU(BN(conv1x1(T))) mapping thermal features onto the RGB width."""

    def __init__(self, in_c: int, out_c: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_c, out_c, 1, rng)
        self.bn = BatchNorm2d(out_c)

    def forward(self, t: Tensor) -> Tensor:
        return ops.gelu(self.bn(self.conv(t)))
