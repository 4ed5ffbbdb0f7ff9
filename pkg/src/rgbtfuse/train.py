"""Training, evaluation, inference and ablation drivers.

Optimisation: AdamW with three learning-rate groups (backbone, fusion,
decoder), layer-wise decay inside the backbone, cosine annealing with warm
restarts, and an EMA shadow of the weights.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import losses, metrics, netpbm
from .errors import ConfigError, DataError, NumericError, TrainingDiverged
from .model import ModelConfig, RGBTSegmenter, model_param_count
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

GROUPS = ("backbone", "fusion", "decoder")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    max_steps: int | None = None
    lr_backbone: float = 5e-5
    lr_fusion: float = 2e-4
    lr_decoder: float = 3e-4
    layer_decay: float = 0.9
    lr_scale: float = 1.0           # multiplies all three groups (desk-scale runs)
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    restart_epochs: int | None = None   # None -> max(epochs // 4, 1)
    min_lr_factor: float = 0.01
    ema: bool = True
    ema_decay: float = 0.999
    flip_prob: float = 0.5
    class_weights: bool = True
    lambda_aux: float = 0.4
    seed: int = 0
    # model
    base_width: int = 8
    num_classes: int = 5
    blocks_per_stage: int = 1
    fusion: tuple = ("freq", "freq", "sem", "sem")
    decoder: str = "panet"
    deep_supervision: bool = True
    use_thermal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fusion", tuple(self.fusion))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0 or not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("ema_decay and flip_prob must lie in [0, 1]")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.base_width, self.num_classes, self.blocks_per_stage, self.fusion,
                           self.decoder, self.deep_supervision, self.use_thermal, self.seed)

    @property
    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(lambda_aux=self.lambda_aux)

    @property
    def restart_period(self) -> int:
        return self.restart_epochs if self.restart_epochs else max(self.epochs // 4, 1)

    def with_model(self, mcfg: ModelConfig) -> "TrainConfig":
        return dataclasses.replace(
            self, base_width=mcfg.base_width, num_classes=mcfg.num_classes,
            blocks_per_stage=mcfg.blocks_per_stage, fusion=mcfg.fusion, decoder=mcfg.decoder,
            deep_supervision=mcfg.deep_supervision, use_thermal=mcfg.use_thermal)


# ---------------------------------------------------------------------------
# flat key=value config files

def _coerce(raw: str, f: dataclasses.Field):
    t = str(f.type)
    if raw.lower() == "none":
        if "None" in t:
            return None
        raise ConfigError(f"{f.name} cannot be None")
    try:
        if t.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("tuple"):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
    return raw


def parse_config(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _coerce(value.strip(), fields[key])
    return dataclasses.replace(base, **updates)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: TrainConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = ",".join(v) if isinstance(v, tuple) else v
    return out


# ---------------------------------------------------------------------------
# parameter groups, optimiser, schedule, EMA

def param_group(name: str) -> tuple:
    """(group, backbone stage index or None) for a parameter name."""
    parts = name.split(".")
    if parts[0] in ("rgb_encoder", "ir_encoder"):
        return "backbone", int(parts[2])
    if parts[0] == "fusions":
        return "fusion", None
    if parts[0] == "decoder":
        return "decoder", None
    raise ConfigError(f"parameter {name!r} belongs to no learning-rate group")


def param_lrs(model, cfg: TrainConfig) -> dict:
    """Base learning rate per parameter name; stage 4 gets the backbone rate, each shallower stage x decay."""
    base = {"backbone": cfg.lr_backbone, "fusion": cfg.lr_fusion, "decoder": cfg.lr_decoder}
    out = {}
    for name, _ in model.named_parameters():
        group, stage = param_group(name)
        lr = base[group]
        if stage is not None:
            lr *= cfg.layer_decay ** (3 - stage)
        out[name] = lr * cfg.lr_scale
    return out


def decays(name: str, p) -> bool:
    # biases, norm affine parameters and scalar gains are exempt
    return p.data.ndim > 1


class AdamW:
    def __init__(self, named_params, lrs: dict, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.names, self.params = zip(*named_params) if named_params else ((), ())
        self.lrs = np.array([lrs[n] for n in self.names], dtype=np.float64)
        self.wd = [weight_decay if decays(n, p) else 0.0 for n, p in zip(self.names, self.params)]
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr_factor: float = 1.0):
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1.0 - self.b1 ** t, 1.0 - self.b2 ** t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            lr = self.lrs[i] * lr_factor
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.wd[i]) - lr * update).astype(p.dtype)

    def moment_state(self):
        return dict(zip(self.names, self.m)), dict(zip(self.names, self.v))

    def load_moments(self, m: dict, v: dict, step: int):
        self.m = [np.array(m[n], dtype=p.dtype) for n, p in zip(self.names, self.params)]
        self.v = [np.array(v[n], dtype=p.dtype) for n, p in zip(self.names, self.params)]
        self.step_count = step


def cosine_restart_factor(step: int, period_steps: int, min_factor: float) -> float:
    """LR multiplier at ``step`` (0-based) for cosine annealing restarted every ``period_steps``."""
    pos = (step % period_steps) / period_steps
    return min_factor + (1.0 - min_factor) * 0.5 * (1.0 + math.cos(math.pi * pos))


class EMA:
    """Shadow copy of parameters (averaged) and buffers (copied)."""

    def __init__(self, model, decay: float):
        self.decay = decay
        self.shadow = model.state_dict()
        self._params = set(n for n, _ in model.named_parameters())

    def update(self, model):
        d = self.decay
        current = model.state_dict()
        for name, value in current.items():
            if name in self._params:
                self.shadow[name] = (d * self.shadow[name] + (1.0 - d) * value).astype(value.dtype)
            else:
                self.shadow[name] = value

    def state_dict(self):
        return self.shadow

    def load_state_dict(self, state: dict):
        self.shadow = {k: np.array(v) for k, v in state.items()}


# ---------------------------------------------------------------------------
# training

def batch_arrays(samples, idx, flips=None):
    rgb = np.concatenate([samples[i].rgb for i in idx])
    ir = np.concatenate([samples[i].thermal for i in idx])
    lab = np.stack([samples[i].labels for i in idx])
    if flips is not None:
        for j, f in enumerate(flips):
            if f:
                rgb[j], ir[j], lab[j] = rgb[j][..., ::-1], ir[j][..., ::-1], lab[j][..., ::-1]
    return rgb, ir, lab


@dataclass
class TrainResult:
    model: RGBTSegmenter
    optimizer: AdamW
    ema: EMA | None
    history: list = field(default_factory=list)
    class_weights: np.ndarray | None = None
    steps: int = 0


def format_epoch(entry: dict) -> str:
    return metrics.format_kv(entry)


def train(cfg: TrainConfig, samples, log_fn=None, model: RGBTSegmenter | None = None) -> TrainResult:
    """Train on ``samples``; deterministic under ``cfg.seed``.

    Raises :class:`TrainingDiverged` with the epoch/step on a non-finite loss.
    """
    if not samples:
        raise DataError("training set is empty")
    k = cfg.num_classes
    for s in samples:
        bad = (s.labels != losses.IGNORE_INDEX) & ((s.labels < 0) | (s.labels >= k))
        if bad.any():
            raise DataError(f"training labels outside [0, {k})")
    model = model or RGBTSegmenter(cfg.model)
    model.train()
    cw = None
    if cfg.class_weights:
        cw = losses.class_weights_from_frequencies(
            losses.label_histogram((s.labels for s in samples), k))
    opt = AdamW(list(model.named_parameters()), param_lrs(model, cfg), (cfg.beta1, cfg.beta2),
                cfg.adam_eps, cfg.weight_decay)
    ema = EMA(model, cfg.ema_decay) if cfg.ema else None
    weights = cfg.loss_weights
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(samples)
    bs = min(cfg.batch_size, n)
    h, w = samples[0].labels.shape
    if bs * (h // 32) * (w // 32) < 2:
        # the stride-32 stage would hold one value per channel for batch statistics
        raise ConfigError(f"batch of {bs} at {h}x{w} leaves a single stride-32 position; "
                          "use a larger batch or image")
    steps_per_epoch = max(n // bs, 1)
    total = cfg.epochs * steps_per_epoch if cfg.max_steps is None else cfg.max_steps
    period = cfg.restart_period * steps_per_epoch
    if cfg.max_steps is not None and cfg.restart_epochs is None:
        period = max(total // 4, 1)
    result = TrainResult(model, opt, ema, class_weights=cw)
    step = 0
    epoch = 0
    while step < total:
        epoch += 1
        order = rng.permutation(n)
        sums: dict = {}
        cm = metrics.ConfusionMatrix(k)
        n_steps = 0
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = order[b * bs:(b + 1) * bs]
            flips = rng.random(len(idx)) < cfg.flip_prob
            rgb, ir, lab = batch_arrays(samples, idx, flips)
            try:
                out = model(Tensor(rgb), Tensor(ir))
                loss, parts = losses.composite_loss(
                    out.logits, lab, weights, cw, out.aux, out.deep or None,
                    deep_supervision=model.cfg.deep_supervision and model.decoder.cfg.supervised)
                if not math.isfinite(parts.total):
                    raise NumericError(f"loss is {parts.total}")
                model.zero_grad()
                backward(loss)
            except NumericError as exc:
                raise TrainingDiverged(epoch, step + 1, str(exc)) from exc
            opt.step(cosine_restart_factor(step, period, cfg.min_lr_factor))
            if ema is not None:
                ema.update(model)
            step += 1
            n_steps += 1
            for key, v in parts.as_dict().items():
                sums[key] = sums.get(key, 0.0) + v
            cm.accumulate(out.logits.data.argmax(axis=1), lab)
        entry = {"epoch": epoch, "step": step}
        entry["loss"] = sums.pop("total") / n_steps
        entry.update({key: v / n_steps for key, v in sums.items()})
        entry["miou"] = metrics.miou(cm)
        entry["pixel_acc"] = metrics.pixel_accuracy(cm)
        result.history.append(entry)
        if log_fn is not None:
            log_fn(format_epoch(entry))
    result.steps = step
    model.eval()
    return result


def ema_model(result_or_model, ema: EMA) -> RGBTSegmenter:
    """A fresh model carrying the EMA shadow weights."""
    src = result_or_model.model if isinstance(result_or_model, TrainResult) else result_or_model
    clone = RGBTSegmenter(src.cfg)
    clone.load_state_dict(ema.state_dict())
    return clone.eval()


def save_result(path, cfg: TrainConfig, result: TrainResult):
    meta = format_config(cfg)
    meta["steps"] = result.steps
    return ckpt_io.save_checkpoint(path, result.model, len(result.history), result.optimizer, result.ema, meta)


def config_from_checkpoint(ck: ckpt_io.Checkpoint) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    text = "\n".join(f"{k}={v}" for k, v in ck.metadata.items() if k in known)
    return parse_config(text)


def model_from_checkpoint(path, use_ema: bool = False) -> RGBTSegmenter:
    ck = ckpt_io.load_checkpoint(path)
    cfg = config_from_checkpoint(ck)
    model = RGBTSegmenter(cfg.model)
    ckpt_io.restore_model(ck, model, use_ema)
    return model.eval()


# ---------------------------------------------------------------------------
# evaluation / inference / ablation

def confusion(model, samples, tta: bool = False) -> metrics.ConfusionMatrix:
    model.eval()
    cm = metrics.ConfusionMatrix(model.cfg.num_classes)
    for s in samples:
        logits = metrics.predict_logits(model, s.rgb, s.thermal, tta)
        cm.accumulate(logits.argmax(axis=1)[0], s.labels)
    return cm


def evaluate(model, samples, tta: bool = False, ignore_class: int | None = None) -> dict:
    """Metric report; with ``tta`` both the plain and the flip-averaged numbers are included."""
    out = metrics.report(confusion(model, samples, False), ignore_class)
    if tta:
        out.update(metrics.report(confusion(model, samples, True), ignore_class, prefix="tta_"))
    return out


PALETTE_SEED = 20240607


def palette(num_classes: int) -> np.ndarray:
    """Fixed colour per class id (uint8, (K, 3)); class 0 is black."""
    rng = np.random.default_rng(PALETTE_SEED)
    pal = rng.integers(40, 256, size=(max(num_classes, 1), 3)).astype(np.uint8)
    pal[0] = 0
    return pal


def infer(model, rgb_path, ir_path, out_path, tta: bool = False):
    """Write ``<out>`` label PGM and ``<out stem>_color.ppm``; return the label map."""
    from .data import load_sample
    s = load_sample(rgb_path, ir_path)
    labels = metrics.predict_logits(model.eval(), s.rgb, s.thermal, tta).argmax(axis=1)[0]
    out_path = Path(out_path)
    netpbm.write_labels(out_path, labels)
    color_path = out_path.with_name(out_path.stem + "_color.ppm")
    netpbm.write_raw(color_path, palette(model.cfg.num_classes)[labels])
    return labels, color_path


ABLATIONS = ("full", "all_freq", "no_deepsup", "fpn")


def ablate(base: ModelConfig, variant: str) -> dict:
    """Parameter-count report for ``variant`` against the full model."""
    if variant not in ABLATIONS:
        raise ConfigError(f"variant must be one of {ABLATIONS}")
    cfg = base.variant(variant)
    model = RGBTSegmenter(cfg)
    n = model.num_parameters()
    if n != model_param_count(cfg):
        raise ConfigError("module tree and closed-form parameter count disagree")
    full = model_param_count(base.variant("full"))
    return {"variant": variant, "params": n, "full_params": full, "delta": n - full,
            "decoder_params": sum(p.size for _, p in model.decoder.named_parameters()),
            "fusion": ",".join(cfg.fusion), "decoder": cfg.decoder,
            "deep_supervision": int(cfg.deep_supervision and model.decoder.cfg.supervised)}
