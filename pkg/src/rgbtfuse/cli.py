"""Command-line entry point: train, eval, infer, ablate, generate."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data, metrics, train as tr
from .checkpoint import load_checkpoint, restore_model
from .errors import RGBTError
from .model import ModelConfig, RGBTSegmenter


def cmd_train(args) -> int:
    cfg = tr.load_config(args.config) if args.config else tr.TrainConfig()
    samples = data.load_dataset(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "w") as logf:
        def emit(line):
            print(line, flush=True)
            logf.write(line + "\n")
        result = tr.train(cfg, samples, emit)
    tr.save_result(out / "model.ckpt", cfg, result)
    print(f"checkpoint={out / 'model.ckpt'}")
    return 0


def _load_model(path, use_ema: bool) -> RGBTSegmenter:
    ck = load_checkpoint(path)
    model = RGBTSegmenter(tr.config_from_checkpoint(ck).model)
    return restore_model(ck, model, use_ema).eval()


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt, args.ema)
    samples = data.load_dataset(args.data, args.split)
    cm = tr.confusion(model, samples)
    print(metrics.format_table(cm, args.ignore_class))
    report = tr.evaluate(model, samples, args.tta, args.ignore_class)
    print(metrics.format_kv(report))
    return 0


def cmd_infer(args) -> int:
    model = _load_model(args.ckpt, args.ema)
    labels, color = tr.infer(model, args.rgb, args.ir, args.out, args.tta)
    print(f"labels={args.out} color={color} height={labels.shape[0]} width={labels.shape[1]}")
    return 0


def cmd_ablate(args) -> int:
    base = ModelConfig(base_width=args.base_width, num_classes=args.num_classes)
    variants = tr.ABLATIONS if args.variant == "all" else (args.variant,)
    for v in variants:
        print(metrics.format_kv(tr.ablate(base, v)))
    return 0


def cmd_generate(args) -> int:
    cfg = data.SceneConfig(seed=args.seed, height=args.size, width=args.size, num_classes=args.num_classes)
    samples = data.make_dataset(args.n, cfg, args.night_fraction)
    d = data.save_dataset(samples, args.out, args.split)
    print(f"split={d} samples={len(samples)} night={sum(s.night for s in samples)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgbtfuse", description="RGB-thermal semantic segmentation harness")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--tta", action="store_true", help="also report horizontal-flip TTA metrics")
    e.add_argument("--ema", action="store_true", help="use the EMA shadow weights")
    e.add_argument("--ignore-class", type=int, default=None, help="class id left out of mIoU")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="segment one aligned RGB/thermal pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--rgb", required=True)
    i.add_argument("--ir", required=True)
    i.add_argument("--out", required=True, help="output label PGM; a _color.ppm is written beside it")
    i.add_argument("--ema", action="store_true")
    i.add_argument("--tta", action="store_true")
    i.set_defaults(fn=cmd_infer)

    a = sub.add_parser("ablate", help="parameter report for an ablation variant")
    a.add_argument("--variant", choices=tr.ABLATIONS + ("all",), default="all")
    a.add_argument("--base-width", type=int, default=8)
    a.add_argument("--num-classes", type=int, default=5)
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("generate", help="write a synthetic dataset split")
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="train")
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--num-classes", type=int, default=5)
    g.add_argument("--night-fraction", type=float, default=None)
    g.set_defaults(fn=cmd_generate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except RGBTError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
