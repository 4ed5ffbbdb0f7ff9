"""Segmentation objectives and their weighted composition.

All losses take logits (n, K, H, W) and an integer label map (n, H, W);
pixels equal to ``ignore_index`` contribute nothing. Each loss is composed
from differentiable kernels, with data-dependent selections (sort orders,
hard-pixel masks, edge masks) entering as constants.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DataError
from .tensor import Tensor

IGNORE_INDEX = 255
MAIN_TERMS = ("ce", "dice", "lovasz", "ohem", "boundary", "focal")


# ---------------------------------------------------------------------------
# class weights

def label_histogram(label_maps, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    hist = np.zeros(num_classes, dtype=np.int64)
    for lab in label_maps:
        lab = np.asarray(lab)
        lab = lab[lab != ignore_index]
        hist += np.bincount(lab.ravel(), minlength=num_classes)[:num_classes]
    return hist


def class_weights_from_frequencies(histogram, clip=(0.5, 5.0)) -> np.ndarray:
    """Inverse-frequency weights, mean-normalised over observed classes, then clipped.

    Classes never observed receive the upper clip value.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.ndim != 1 or hist.size == 0 or hist.sum() <= 0:
        raise ConfigError("class weights need a non-empty label histogram")
    seen = hist > 0
    freq = hist[seen] / hist[seen].sum()
    raw = 1.0 / freq
    w = np.full(hist.shape, clip[1])
    w[seen] = raw / raw.mean()
    return np.clip(w, clip[0], clip[1])


# ---------------------------------------------------------------------------
# shared plumbing

def _labels(logits: Tensor, labels, ignore_index: int):
    lab = np.asarray(labels)
    if lab.ndim == 2:
        lab = lab[None]
    n, k, h, w = logits.shape
    if lab.shape != (n, h, w):
        raise DataError(f"labels {lab.shape} do not match logits {logits.shape}")
    valid = lab != ignore_index
    bad = valid & ((lab < 0) | (lab >= k))
    if bad.any():
        raise DataError(f"label ids outside [0, {k}) present: {np.unique(lab[bad]).tolist()}")
    safe = np.where(valid, lab, 0)
    onehot = ((safe[:, None] == np.arange(k)[None, :, None, None]) & valid[:, None]).astype(logits.dtype)
    return onehot, valid, safe


def _zero(logits: Tensor) -> Tensor:
    """Zero with a (zero) gradient path to the logits."""
    return ops.sum(logits * 0.0)


def _pixel_weights(safe, valid, class_weights, dtype):
    if class_weights is None:
        return valid.astype(dtype)
    cw = np.asarray(class_weights, dtype=np.float64)
    return (cw[safe] * valid).astype(dtype)


def per_pixel_ce(logits: Tensor, labels, class_weights=None, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Weighted CE per pixel, shape (n, 1, H, W); ignored pixels are 0."""
    onehot, valid, safe = _labels(logits, labels, ignore_index)
    logp = ops.log_softmax_channel(logits)
    pw = _pixel_weights(safe, valid, class_weights, logits.dtype)[:, None]
    return -ops.sum(logp * (onehot * pw), axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# individual objectives

def smoothed_weighted_ce(logits: Tensor, labels, class_weights=None, epsilon: float = 0.1,
                         ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Cross-entropy against (1-eps)*onehot + eps/K, weighted by the true class."""
    onehot, valid, safe = _labels(logits, labels, ignore_index)
    count = int(valid.sum())
    if count == 0:
        return _zero(logits)
    k = logits.shape[1]
    target = (1.0 - epsilon) * onehot + (epsilon / k) * valid[:, None]
    coeff = (target * _pixel_weights(safe, valid, class_weights, np.float64)[:, None]).astype(logits.dtype)
    return -ops.sum(ops.log_softmax_channel(logits) * coeff) / count


def weighted_ce(logits: Tensor, labels, class_weights=None, ignore_index: int = IGNORE_INDEX) -> Tensor:
    return smoothed_weighted_ce(logits, labels, class_weights, 0.0, ignore_index)


def soft_dice(logits: Tensor, labels, smooth: float = 1.0, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean over present classes of 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)."""
    onehot, valid, _ = _labels(logits, labels, ignore_index)
    gsum = onehot.sum(axis=(0, 2, 3)).astype(np.float64)
    present = gsum > 0
    if not present.any():
        return _zero(logits)
    p = ops.softmax_channel(logits) * valid[:, None].astype(logits.dtype)
    inter = ops.sum(p * onehot, axis=(0, 2, 3))
    psum = ops.sum(p, axis=(0, 2, 3))
    dice = 1.0 - (2.0 * inter + smooth) / (psum + (gsum + smooth).astype(logits.dtype))
    return ops.sum(dice * present.astype(logits.dtype)) / int(present.sum())


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending-error ordering."""
    gt = gt_sorted.astype(np.float64)
    gts = gt.sum()
    intersection = gts - np.cumsum(gt)
    union = gts + np.cumsum(1.0 - gt)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Lovasz extension of the per-class Jaccard loss, averaged over present classes.

    Pixels from the whole batch are pooled; ties in the error sort are broken
    by pixel index.
    """
    onehot, valid, _ = _labels(logits, labels, ignore_index)
    present = onehot.sum(axis=(0, 2, 3)) > 0
    if not present.any():
        return _zero(logits)
    errors = ops.abs(onehot - ops.softmax_channel(logits))
    flat_valid = np.flatnonzero(valid.ravel())
    coeff = np.zeros(errors.shape, dtype=np.float64)
    for c in np.flatnonzero(present):
        e = errors.data[:, c].ravel()[flat_valid]
        order = np.argsort(-e, kind="stable")
        g = lovasz_grad(onehot[:, c].ravel()[flat_valid][order])
        plane = np.zeros(valid.size)
        plane[flat_valid[order]] = g
        coeff[:, c] = plane.reshape(valid.shape)
    return ops.sum(errors * coeff.astype(logits.dtype)) / int(present.sum())


def ohem_ce(logits: Tensor, labels, class_weights=None, keep_fraction: float = 0.25,
            min_kept: int | None = None, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean weighted CE over the hardest max(keep_fraction * N, min_kept) pixels.

    ``min_kept`` defaults to N // 16 for N non-ignored pixels.
    """
    per = per_pixel_ce(logits, labels, class_weights, ignore_index)
    valid = np.asarray(labels).reshape(per.shape) != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _zero(logits)
    if min_kept is None:
        min_kept = n_valid // 16
    keep = min(max(int(keep_fraction * n_valid), min_kept, 1), n_valid)
    idx = np.flatnonzero(valid.ravel())
    order = np.argsort(-per.data.ravel()[idx], kind="stable")
    mask = np.zeros(per.size, dtype=per.dtype)
    mask[idx[order[:keep]]] = 1.0
    return ops.sum(per * mask.reshape(per.shape)) / keep


def focal_loss(logits: Tensor, labels, gamma: float = 2.5, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of (1 - p_t)^gamma * (-log p_t) over non-ignored pixels (unweighted)."""
    onehot, valid, _ = _labels(logits, labels, ignore_index)
    count = int(valid.sum())
    if count == 0:
        return _zero(logits)
    log_pt = ops.sum(ops.log_softmax_channel(logits) * onehot, axis=1, keepdims=True)
    pt = ops.exp(log_pt)
    term = ops.power(1.0 - pt, gamma) * (-log_pt)
    return ops.sum(term * valid[:, None].astype(logits.dtype)) / count


_LAPLACE_NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def edge_mask(labels, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Pixels where the 8-neighbour Laplacian (centre 8, neighbours -1) of the label map
    is nonzero, dilated by one pixel (3x3). Borders use replicate padding."""
    lab = np.asarray(labels).astype(np.int64)
    if lab.ndim == 2:
        lab = lab[None]
    h, w = lab.shape[1:]
    padded = np.pad(lab, ((0, 0), (1, 1), (1, 1)), mode="edge")
    lap = 8 * lab
    for dy, dx in _LAPLACE_NEIGHBOURS:
        lap = lap - padded[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    edges = np.pad(lap != 0, ((0, 0), (1, 1), (1, 1)))
    dilated = np.zeros((lab.shape[0], h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            dilated |= edges[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return dilated & (lab != ignore_index)


def boundary_loss(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean unweighted CE over label-edge pixels; 0 when the map has no edges."""
    mask = edge_mask(np.asarray(labels).reshape(logits.shape[0], *logits.shape[2:]), ignore_index)
    count = int(mask.sum())
    if count == 0:
        return _zero(logits)
    per = per_pixel_ce(logits, labels, None, ignore_index)
    return ops.sum(per * mask[:, None].astype(logits.dtype)) / count


# ---------------------------------------------------------------------------
# composition

@dataclass(frozen=True)
class LossWeights:
    ce: float = 0.4
    dice: float = 0.2
    lovasz: float = 0.2
    ohem: float = 0.1
    boundary: float = 0.1
    focal: float = 0.25
    focal_gamma: float = 2.5
    lambda_aux: float = 0.4
    deep: tuple = (0.1, 0.2, 0.3, 0.4)
    label_smoothing: float = 0.1
    ohem_keep: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "deep", tuple(self.deep))
        values = [self.ce, self.dice, self.lovasz, self.ohem, self.boundary, self.focal,
                  self.lambda_aux, *self.deep]
        if any(v < 0 for v in values):
            raise ConfigError("loss weights must be nonnegative")
        if len(self.deep) != 4:
            raise ConfigError("exactly four deep-supervision weights are required")


@dataclass
class LossBreakdown:
    ce: float
    dice: float
    lovasz: float
    ohem: float
    boundary: float
    focal: float
    aux: float | None = None
    deep: tuple = ()
    main: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        deep = d.pop("deep")
        for i, v in enumerate(deep, 1):
            d[f"deep{i}"] = v
        if d["aux"] is None:
            d.pop("aux")
        return d


def main_value(parts: dict, weights: LossWeights) -> float:
    return math.fsum(getattr(weights, k) * float(parts[k]) for k in MAIN_TERMS)


def total_value(main: float, aux, deep, weights: LossWeights) -> float:
    """main + lambda_aux * (aux + sum_i w_i * deep_i); just ``main`` without supervision terms."""
    if aux is None:
        return main
    deep_sum = math.fsum(w * float(d) for w, d in zip(weights.deep, deep))
    return main + weights.lambda_aux * (float(aux) + deep_sum)


def assemble(parts: dict, weights: LossWeights, aux=None, deep=()) -> LossBreakdown:
    """Build the breakdown from per-term scalar values."""
    main = main_value(parts, weights)
    return LossBreakdown(**{k: float(parts[k]) for k in MAIN_TERMS},
                         aux=None if aux is None else float(aux),
                         deep=tuple(float(d) for d in deep),
                         main=main, total=total_value(main, aux, deep, weights))


def composite_loss(main_logits: Tensor, labels, weights: LossWeights = LossWeights(),
                   class_weights=None, aux_logits: Tensor | None = None, deep_logits=None,
                   deep_supervision: bool = True, ignore_index: int = IGNORE_INDEX):
    """Return ``(loss_tensor, breakdown)``; the tensor is what gets backpropagated."""
    if deep_supervision and (aux_logits is None or deep_logits is None or len(deep_logits) != 4):
        raise ConfigError("deep supervision is on but auxiliary/deep logits are missing")
    terms = {
        "ce": smoothed_weighted_ce(main_logits, labels, class_weights, weights.label_smoothing, ignore_index),
        "dice": soft_dice(main_logits, labels, ignore_index=ignore_index),
        "lovasz": lovasz_softmax(main_logits, labels, ignore_index),
        "ohem": ohem_ce(main_logits, labels, class_weights, weights.ohem_keep, ignore_index=ignore_index),
        "boundary": boundary_loss(main_logits, labels, ignore_index),
        "focal": focal_loss(main_logits, labels, weights.focal_gamma, ignore_index),
    }
    loss = None
    for k in MAIN_TERMS:
        part = terms[k] * getattr(weights, k)
        loss = part if loss is None else loss + part
    aux_t, deep_t = None, ()
    if deep_supervision:
        aux_t = weighted_ce(aux_logits, labels, class_weights, ignore_index)
        deep_t = tuple(weighted_ce(d, labels, class_weights, ignore_index) for d in deep_logits)
        extra = aux_t
        for w, d in zip(weights.deep, deep_t):
            extra = extra + d * w
        loss = loss + extra * weights.lambda_aux
    breakdown = assemble({k: v.item() for k, v in terms.items()}, weights,
                         None if aux_t is None else aux_t.item(), [d.item() for d in deep_t])
    return loss, breakdown
