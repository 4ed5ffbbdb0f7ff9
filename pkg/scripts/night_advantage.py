"""Train with and without thermal input on a half-night synthetic set; compare night mIoU."""
import argparse

from rgbtfuse.experiments import NIGHT_LR_SCALE, night_advantage


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--test", type=int, default=40)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--lr-scale", type=float, default=NIGHT_LR_SCALE)
    args = p.parse_args()
    res = night_advantage(args.samples, args.steps, args.test, args.seed, args.lr_scale)
    print(" ".join(f"{k}={v:.4f}" for k, v in res.items()))


if __name__ == "__main__":
    main()
