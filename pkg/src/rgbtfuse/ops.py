"""Differentiable numeric kernels over :class:`~rgbtfuse.tensor.Tensor`.

Convolution, pooling and resizing accumulate in float64 and round the result
back to the input dtype.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .tensor import Tensor, record

_ACC = np.float64
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


# ---------------------------------------------------------------------------
# helpers

def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    return _wrap(a, b), b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _out_dtype(*tensors):
    return np.result_type(*[t.dtype for t in tensors])


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, "add", (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, "sub", (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, "mul", (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return record(out, "div", (a, b), back)


def neg(x: Tensor) -> Tensor:
    return record(-x.data, "neg", (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    xd = x.data

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * xd ** (p - 1.0)
        if p > 1.0:
            d = np.where(xd == 0, 0.0, d)
        return (g * d,)
    return record(xd ** p, "pow", (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.log(xd), "log", (x,), lambda g: (g / xd,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    xd = x.data
    return record(np.abs(xd), "abs", (x,), lambda g: (g * np.sign(xd),))


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return record(x.data.astype(dtype), "cast", (x,), lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation

def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(out), "sum", (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    basic = all(isinstance(i, (slice, int)) for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(np.array(x.data[index]), "getitem", (x,), back)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    dtype = _out_dtype(*tensors)
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return record(out, "concat", tensors, back)


def split_channels(x: Tensor, sizes) -> list:
    out, start = [], 0
    for n in sizes:
        out.append(getitem(x, (slice(None), slice(start, start + n))))
        start += n
    return out


def flip(x: Tensor, axis: int = -1) -> Tensor:
    return record(np.flip(x.data, axis=axis).copy(), "flip", (x,),
                  lambda g: (np.flip(g, axis=axis).copy(),))


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return record(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + _GELU_C * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def back(g):
        dinner = _SQRT_2_OVER_PI * (1 + 3 * _GELU_C * xd ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return record(out, "gelu", (x,), back)


def softmax_channel(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return record(p, "softmax", (x,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def log_softmax_channel(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return record(out, "log_softmax", (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# convolution

def _pad(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    widths = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    return np.pad(x, widths, mode="constant" if mode == "zero" else "edge")


def _unpad(g: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    h, w = g.shape[2] - 2 * ph, g.shape[3] - 2 * pw
    if mode == "zero":
        return g[:, :, ph:ph + h, pw:pw + w]
    # replicate: padded cells are copies of the border row/column
    if ph:
        core = g[:, :, ph:ph + h].copy()
        core[:, :, 0] += g[:, :, :ph].sum(axis=2)
        core[:, :, -1] += g[:, :, ph + h:].sum(axis=2)
        g = core
    if pw:
        core = g[:, :, :, pw:pw + w].copy()
        core[:, :, :, 0] += g[:, :, :, :pw].sum(axis=3)
        core[:, :, :, -1] += g[:, :, :, pw + w:].sum(axis=3)
        g = core
    return g


def _conv_dense_fwd(xp, w, stride, oh, ow):
    kh, kw = w.shape[2:]
    if kh == 1 and kw == 1:
        xs = xp[:, :, ::stride, ::stride][:, :, :oh, :ow]
        return np.tensordot(xs, w[:, :, 0, 0], axes=([1], [1])).transpose(0, 3, 1, 2), None
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2), win


def _conv_dense_bwd(g, xp, w, win, stride):
    kh, kw = w.shape[2:]
    n, _, oh, ow = g.shape
    if win is None:
        xs = xp[:, :, ::stride, ::stride][:, :, :oh, :ow]
        gw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dxp = np.zeros_like(xp)
        dxp[:, :, ::stride, ::stride][:, :, :oh, :ow] += \
            np.tensordot(g, w[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
        return dxp, gw
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    cols = np.tensordot(g, w, axes=([1], [0]))  # n, oh, ow, c, kh, kw
    dxp = np.zeros_like(xp)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp, gw


def _conv_depthwise_fwd(xp, w, stride, oh, ow):
    kh, kw = w.shape[2:]
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    out = np.zeros((xp.shape[0], xp.shape[1], oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + hs:stride, j:j + ws:stride] * w[None, :, 0, i, j, None, None]
    return out


def _conv_depthwise_bwd(g, xp, w, stride):
    kh, kw = w.shape[2:]
    _, _, oh, ow = g.shape
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    dxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            dxp[sl] += g * w[None, :, 0, i, j, None, None]
    return dxp, gw


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding=0, pad_mode: str = "zero", groups: int = 1) -> Tensor:
    """2-D cross-correlation over (n, c, h, w) with zero or replicate padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    ph, pw = (padding, padding) if isinstance(padding, int) else tuple(padding)
    if pad_mode not in ("zero", "replicate"):
        raise ConfigError(f"unknown padding mode {pad_mode!r}")
    n, c, h, w_ = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups:
        raise ConfigError(f"channels {c}->{o} not divisible by groups={groups}")
    if cg * groups != c:
        raise ConfigError(f"conv2d input has {c} channels, weight expects {cg * groups}")
    if h + 2 * ph < kh or w_ + 2 * pw < kw:
        raise ConfigError(f"input {h}x{w_} (pad {ph},{pw}) smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ConfigError(f"bias shape {bias.shape} != ({o},)")
    oh = conv_output_size(h, kh, stride, ph)
    ow = conv_output_size(w_, kw, stride, pw)

    dtype = x.dtype
    xp = _pad(x.data.astype(_ACC, copy=False), ph, pw, pad_mode)
    wd = weight.data.astype(_ACC, copy=False)
    depthwise = groups == c and o == c and cg == 1
    cache = None
    if depthwise:
        out = _conv_depthwise_fwd(xp, wd, stride, oh, ow)
    elif groups == 1:
        out, cache = _conv_dense_fwd(xp, wd, stride, oh, ow)
    else:
        og = o // groups
        parts, cache = [], []
        for gi in range(groups):
            part, win = _conv_dense_fwd(xp[:, gi * cg:(gi + 1) * cg], wd[gi * og:(gi + 1) * og], stride, oh, ow)
            parts.append(part)
            cache.append(win)
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias.data.astype(_ACC)[None, :, None, None]
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError in record
        out = out.astype(dtype)

    def back(g):
        g64 = g.astype(_ACC)
        if depthwise:
            dxp, gw = _conv_depthwise_bwd(g64, xp, wd, stride)
        elif groups == 1:
            dxp, gw = _conv_dense_bwd(g64, xp, wd, cache, stride)
        else:
            og = o // groups
            dxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for gi in range(groups):
                osl, isl = slice(gi * og, (gi + 1) * og), slice(gi * cg, (gi + 1) * cg)
                d, gwi = _conv_dense_bwd(g64[:, osl], xp[:, isl], wd[osl], cache[gi], stride)
                dxp[:, isl] = d
                gw[osl] = gwi
        dx = _unpad(dxp, ph, pw, pad_mode) if x.requires_grad else None
        gb = g64.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    if bias is None:
        return record(out, "conv2d", parents, lambda g: back(g)[:2])
    return record(out, "conv2d", parents, back)


# ---------------------------------------------------------------------------
# normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization; updates the running buffers in place."""
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ConfigError(f"batch_norm: {c} channels but state width {gamma.shape[0]}")
    xd = x.data.astype(_ACC)
    count = n * h * w
    if training:
        if count == 1:
            raise ConfigError("batch_norm: training-mode statistics need more than one value per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu = running_mean.astype(_ACC)
        var = running_var.astype(_ACC)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data.astype(_ACC)
    out = (xhat * gd[None, :, None, None] + beta.data.astype(_ACC)[None, :, None, None]).astype(x.dtype)

    def back(g):
        g = g.astype(_ACC)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if training:
            dx = (inv[None, :, None, None] / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return record(out, "batch_norm", (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# pooling and resizing

def channel_pool(x: Tensor) -> Tensor:
    """Stack per-pixel channel mean and channel max: (n, c, h, w) -> (n, 2, h, w)."""
    xd = x.data
    c = xd.shape[1]
    avg = xd.astype(_ACC).mean(axis=1, keepdims=True)
    idx = xd.argmax(axis=1)[:, None]
    mx = np.take_along_axis(xd, idx, axis=1)
    out = np.concatenate([avg.astype(x.dtype), mx], axis=1)

    def back(g):
        dx = np.broadcast_to(g[:, :1] / c, xd.shape).copy()
        np.put_along_axis(dx, idx, np.take_along_axis(dx, idx, axis=1) + g[:, 1:2], axis=1)
        return (dx,)

    return record(out, "channel_pool", (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: (n, c, h, w) -> (n, c, 1, 1)."""
    shape = x.shape
    hw = shape[2] * shape[3]
    out = x.data.astype(_ACC).mean(axis=(2, 3), keepdims=True).astype(x.dtype)
    return record(out, "global_avg_pool", (x,),
                  lambda g: (np.broadcast_to(g / hw, shape).copy(),))


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (n_out, n_in)."""
    mat = np.zeros((n_out, n_in), dtype=_ACC)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        mat[o, i0] += 1.0 - lam
        mat[o, i1] += lam
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return record(x.data.copy(), "resize", (x,), lambda g: (g,))
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    out = np.matmul(ah, np.matmul(x.data.astype(_ACC), aw.T)).astype(x.dtype)
    return record(out, "resize", (x,), lambda g: (np.matmul(ah.T, np.matmul(g.astype(_ACC), aw)),))


# ---------------------------------------------------------------------------
# gaussian low-pass

def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    """k x k grid proportional to exp(-(dx^2 + dy^2) / (2 sigma^2)), summing to 1."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"gaussian kernel size must be a positive odd integer, got {k}")
    if not sigma > 0:
        raise ConfigError(f"gaussian sigma must be positive, got {sigma}")
    r = k // 2
    d = np.arange(-r, r + 1, dtype=_ACC)
    grid = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return grid / grid.sum()


def depthwise_gaussian_blur(x: Tensor, k: int = 7, sigma: float = 2.0) -> Tensor:
    """Fixed (non-trainable) Gaussian blur per channel with replicate padding."""
    kern = gaussian_kernel(k, sigma)
    c = x.shape[1]
    weight = Tensor(np.broadcast_to(kern, (c, 1, k, k)).copy())
    return conv2d(x, weight, None, stride=1, padding=k // 2, pad_mode="replicate", groups=c)
