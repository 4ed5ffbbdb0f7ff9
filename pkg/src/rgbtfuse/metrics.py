"""Confusion-matrix based segmentation metrics and flip test-time augmentation."""
from __future__ import annotations

import numpy as np

from .errors import DataError
from .tensor import Tensor, no_grad

IGNORE_INDEX = 255


class ConfusionMatrix:
    """K x K counts; entry (g, p) = pixels with truth g predicted as p."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else np.array(counts, dtype=np.int64))

    def accumulate(self, pred, truth, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise DataError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        keep = truth != ignore_index
        p, g = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
        k = self.num_classes
        for name, arr in (("truth", g), ("prediction", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise DataError(f"{name} contains class ids outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _ious(cm: ConfusionMatrix, ignore_class: int | None = None):
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, diag / np.where(union > 0, union, 1), 0.0)
    scored = np.ones(cm.num_classes, dtype=bool)
    if ignore_class is not None:
        scored[ignore_class] = False
    return iou, union > 0, scored


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; classes with an empty union get 0."""
    return _ious(cm)[0]


def miou(cm: ConfusionMatrix, ignore_class: int | None = None) -> float:
    """Mean IoU over classes with nonzero union."""
    iou, present, scored = _ious(cm, ignore_class)
    sel = present & scored
    return float(iou[sel].mean()) if sel.any() else 0.0


def miou_all(cm: ConfusionMatrix, ignore_class: int | None = None) -> float:
    """Mean IoU over every declared class, absent ones scoring 0."""
    iou, _, scored = _ious(cm, ignore_class)
    return float(iou[scored].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    return float(np.trace(cm.counts) / total) if total else 0.0


def report(cm: ConfusionMatrix, ignore_class: int | None = None, prefix: str = "") -> dict:
    out = {f"{prefix}miou": miou(cm, ignore_class), f"{prefix}miou_all": miou_all(cm, ignore_class),
           f"{prefix}pixel_acc": pixel_accuracy(cm)}
    for c, v in enumerate(iou_per_class(cm)):
        out[f"{prefix}iou{c}"] = float(v)
    return out


def format_kv(values: dict) -> str:
    return " ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())


def format_table(cm: ConfusionMatrix, ignore_class: int | None = None) -> str:
    iou = iou_per_class(cm)
    _, present, _ = _ious(cm)
    lines = ["class      IoU"]
    for c, v in enumerate(iou):
        tag = "" if present[c] else "  (absent)"
        if c == ignore_class:
            tag += "  (not scored)"
        lines.append(f"{c:>5}  {v:7.4f}{tag}")
    lines.append(f"mIoU (present)   {miou(cm, ignore_class):.4f}")
    lines.append(f"mIoU (all)       {miou_all(cm, ignore_class):.4f}")
    lines.append(f"pixel accuracy   {pixel_accuracy(cm):.4f}")
    return "\n".join(lines)


def hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def tta_flip_infer(model, rgb, ir) -> np.ndarray:
    """0.5 * (f(x) + hflip(f(hflip(x)))) with the model in eval mode."""
    rgb = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    ir = ir.data if isinstance(ir, Tensor) else np.asarray(ir)
    with no_grad():
        plain = model.predict(Tensor(rgb), Tensor(ir)).data
        flipped = model.predict(Tensor(hflip(rgb)), Tensor(hflip(ir))).data
    return 0.5 * (plain + hflip(flipped))


def predict_logits(model, rgb, ir, tta: bool = False) -> np.ndarray:
    if tta:
        return tta_flip_infer(model, rgb, ir)
    rgb = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    ir = ir.data if isinstance(ir, Tensor) else np.asarray(ir)
    with no_grad():
        return model.predict(Tensor(rgb), Tensor(ir)).data
