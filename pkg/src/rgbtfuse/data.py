"""Synthetic aligned RGB-thermal scenes and the on-disk dataset layout.

Each class owns a fixed RGB colour and thermal intensity (jittered per
object). Night scenes squash RGB contrast towards the image mean and add
sensor noise, leaving thermal and labels untouched, so thermal carries most of
the usable signal after dark.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import netpbm
from .errors import ConfigError, DataError

SPLIT_FILES = ("rgb.ppm", "ir.pgm", "label.pgm")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 5
    objects: tuple = (None, None)   # (min, max) object count; None -> K - 1
    night_prob: float = 0.5
    rgb_noise: float = 0.03
    thermal_noise: float = 0.03
    night_noise: float = 0.08
    night_contrast: tuple = (0.05, 0.2)

    def __post_init__(self):
        if self.height % 32 or self.width % 32 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"scene size {self.height}x{self.width} must be a positive multiple of 32")
        if self.num_classes < 2 or self.num_classes > 255:
            raise ConfigError("num_classes must lie in [2, 255]")
        lo, hi = self.object_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad object count range {self.objects}")
        if not 0.0 <= self.night_prob <= 1.0:
            raise ConfigError("night_prob must lie in [0, 1]")

    @property
    def object_range(self):
        lo, hi = self.objects
        k = self.num_classes - 1
        return (k if lo is None else lo, k if hi is None else hi)


class SegSample(NamedTuple):
    rgb: np.ndarray       # (1, 3, H, W) float32 in [0, 1]
    thermal: np.ndarray   # (1, 1, H, W) float32 in [0, 1]
    labels: np.ndarray    # (H, W) int64
    night: bool = False


def class_appearance(num_classes: int):
    """Fixed per-class (rgb colours (K, 3), thermal levels (K,)); independent of scene seeds."""
    rng = np.random.default_rng(7919 + num_classes)
    colours = rng.uniform(0.1, 0.9, size=(num_classes, 3))
    colours[0] = (0.45, 0.45, 0.45)
    levels = np.linspace(0.15, 0.9, num_classes)
    levels[1:] = rng.permutation(levels[1:])
    return colours, levels


def _shape_mask(rng, h, w):
    ch, cw = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    ry, rx = rng.uniform(0.12, 0.3) * h, rng.uniform(0.12, 0.3) * w
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if rng.random() < 0.5:
        return (np.abs(yy - ch) <= ry) & (np.abs(xx - cw) <= rx)
    return ((yy - ch) / ry) ** 2 + ((xx - cw) / rx) ** 2 <= 1.0


def generate_scene(cfg: SceneConfig, night: bool | None = None) -> SegSample:
    """Render one scene; ``night`` overrides the config's night probability."""
    rng = np.random.default_rng(cfg.seed)
    h, w, k = cfg.height, cfg.width, cfg.num_classes
    colours, levels = class_appearance(k)
    is_night = bool(rng.random() < cfg.night_prob) if night is None else bool(night)

    labels = np.zeros((h, w), dtype=np.int64)
    lo, hi = cfg.object_range
    n_obj = int(rng.integers(lo, hi + 1))
    classes = np.resize(rng.permutation(np.arange(1, k)), n_obj)
    rgb = np.broadcast_to(colours[0][:, None, None], (3, h, w)).copy()
    thermal = np.full((h, w), levels[0])
    # low-frequency background texture
    rgb += 0.08 * np.sin(np.linspace(0, rng.uniform(1, 4) * np.pi, w))[None, None, :]
    for cls in classes:
        mask = _shape_mask(rng, h, w)
        if not mask.any():
            mask[rng.integers(h), rng.integers(w)] = True
        labels[mask] = cls
        rgb[:, mask] = (colours[cls] + rng.uniform(-0.05, 0.05, 3))[:, None]
        thermal[mask] = levels[cls] + rng.uniform(-0.03, 0.03)
    rgb += rng.normal(0.0, cfg.rgb_noise, rgb.shape)
    thermal += rng.normal(0.0, cfg.thermal_noise, thermal.shape)

    if is_night:
        # separate stream: night degradation never changes labels or thermal
        nrng = np.random.default_rng([cfg.seed, 1])
        factor = nrng.uniform(*cfg.night_contrast)
        mean = rgb.mean(axis=(1, 2), keepdims=True)
        rgb = 0.1 * mean + factor * (rgb - mean) + nrng.normal(0.0, cfg.night_noise, rgb.shape)

    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)[None]
    thermal = np.clip(thermal, 0.0, 1.0).astype(np.float32)[None, None]
    return SegSample(rgb, thermal, labels, is_night)


def sample_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def make_dataset(n: int, cfg: SceneConfig = SceneConfig(), night_fraction: float | None = None) -> list:
    """``n`` scenes with per-index seeds derived from ``cfg.seed``.

    With ``night_fraction`` set, exactly round(n * fraction) scenes are night
    scenes, interleaved evenly; otherwise each scene draws from ``night_prob``.
    """
    out = []
    n_night = None if night_fraction is None else int(round(n * night_fraction))
    for i in range(n):
        night = None
        if n_night is not None:
            night = (i * n_night) // n != ((i + 1) * n_night) // n
        out.append(generate_scene(replace(cfg, seed=sample_seed(cfg.seed, i)), night=night))
    return out


# ---------------------------------------------------------------------------
# on-disk layout: {root}/{split}/{id}_rgb.ppm, {id}_ir.pgm, {id}_label.pgm

def save_dataset(samples, root, split: str = "train"):
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "index.txt", "w") as index:
        for i, s in enumerate(samples):
            sid = f"{i:05d}"
            netpbm.write_image(d / f"{sid}_rgb.ppm", s.rgb)
            netpbm.write_image(d / f"{sid}_ir.pgm", s.thermal)
            netpbm.write_labels(d / f"{sid}_label.pgm", s.labels)
            index.write(f"id={sid} night={int(s.night)}\n")
    return d


def load_sample(rgb_path, ir_path, label_path=None, night: bool = False) -> SegSample:
    rgb = netpbm.read_image(rgb_path)
    ir = netpbm.read_image(ir_path)
    if rgb.shape[1] != 3 or ir.shape[1] != 1:
        raise DataError(f"{rgb_path}/{ir_path}: expected an RGB pixmap and a thermal greymap")
    if rgb.shape[2:] != ir.shape[2:]:
        raise DataError(f"RGB {rgb.shape[2:]} and thermal {ir.shape[2:]} images are not aligned")
    h, w = rgb.shape[2:]
    if h % 32 or w % 32:
        raise DataError(f"image size {h}x{w} is not divisible by 32")
    labels = np.zeros((h, w), dtype=np.int64)
    if label_path is not None:
        labels = netpbm.read_labels(label_path)
        if labels.shape != (h, w):
            raise DataError(f"label map {labels.shape} does not match image {h}x{w}")
    return SegSample(rgb, ir, labels, night)


def load_dataset(root, split: str = "train") -> list:
    d = Path(root) / split
    if not d.is_dir():
        raise DataError(f"dataset split directory {d} does not exist")
    night = {}
    if (d / "index.txt").exists():
        for line in (d / "index.txt").read_text().splitlines():
            fields = dict(f.split("=", 1) for f in line.split())
            night[fields["id"]] = fields.get("night") == "1"
    ids = sorted(p.name[:-len("_rgb.ppm")] for p in d.glob("*_rgb.ppm"))
    if not ids:
        raise DataError(f"no samples found in {d}")
    return [load_sample(d / f"{i}_rgb.ppm", d / f"{i}_ir.pgm", d / f"{i}_label.pgm", night.get(i, False))
            for i in ids]
