"""Desk-scale experiments shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import time

from . import data, metrics
from .model import ModelConfig, model_param_count
from .train import TrainConfig, confusion, train

OVERFIT_LR_SCALE = 20.0
NIGHT_LR_SCALE = 10.0


def overfit(steps: int = 300, n_samples: int = 4, seed: int = 0, lr_scale: float = OVERFIT_LR_SCALE,
            base_width: int = 8, log_fn=None) -> dict:
    """Fit a toy model to a handful of 64x64 scenes; report eval-mode pixel accuracy."""
    t0 = time.perf_counter()
    samples = data.make_dataset(n_samples, data.SceneConfig(seed=seed + 1, night_prob=0.0))
    cfg = TrainConfig(max_steps=steps, batch_size=2, lr_scale=lr_scale, seed=seed, base_width=base_width)
    result = train(cfg, samples, log_fn)
    cm = confusion(result.model, samples)
    return {"steps": result.steps, "pixel_acc": metrics.pixel_accuracy(cm), "miou": metrics.miou(cm),
            "seconds": time.perf_counter() - t0, "result": result, "samples": samples}


def night_advantage(n_train: int = 200, steps: int = 2000, n_test: int = 40, seed: int = 11,
                    lr_scale: float = NIGHT_LR_SCALE, log_fn=None) -> dict:
    """Night-scene mIoU of the RGB-T model and of the thermal-blind ablation, same data and seed."""
    t0 = time.perf_counter()
    train_set = data.make_dataset(n_train, data.SceneConfig(seed=seed), night_fraction=0.5)
    night_test = data.make_dataset(n_test, data.SceneConfig(seed=seed + 1), night_fraction=1.0)
    out = {}
    for name, thermal in (("rgbt", True), ("rgb_only", False)):
        cfg = TrainConfig(max_steps=steps, batch_size=2, lr_scale=lr_scale, use_thermal=thermal)
        result = train(cfg, train_set, log_fn)
        out[f"{name}_night_miou"] = metrics.miou(confusion(result.model, night_test))
    out["advantage_points"] = 100.0 * (out["rgbt_night_miou"] - out["rgb_only_night_miou"])
    out["seconds"] = time.perf_counter() - t0
    return out


def parameter_ordering(widths=(4, 8, 12, 16), num_classes: int = 5) -> list:
    rows = []
    for c in widths:
        base = ModelConfig(base_width=c, num_classes=num_classes)
        counts = {v: model_param_count(base.variant(v)) for v in ("all_freq", "full", "no_deepsup", "fpn")}
        rows.append({"base_width": c, **counts,
                     "ordered": counts["all_freq"] > counts["full"] > counts["fpn"]})
    return rows
