"""Overfit a toy model on four synthetic scenes and report pixel accuracy."""
import argparse

from rgbtfuse.experiments import OVERFIT_LR_SCALE, overfit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-scale", type=float, default=OVERFIT_LR_SCALE)
    p.add_argument("--quiet", action="store_true")
    args = p.parse_args()
    res = overfit(args.steps, seed=args.seed, lr_scale=args.lr_scale, log_fn=None if args.quiet else print)
    print(f"steps={res['steps']} pixel_acc={res['pixel_acc']:.4f} miou={res['miou']:.4f} "
          f"seconds={res['seconds']:.1f}")


if __name__ == "__main__":
    main()
