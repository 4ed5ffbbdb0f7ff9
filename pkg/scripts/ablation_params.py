"""Parameter counts of the ablation variants across encoder widths."""
import argparse

from rgbtfuse.experiments import parameter_ordering


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--widths", type=int, nargs="+", default=[4, 8, 12, 16, 32])
    p.add_argument("--num-classes", type=int, default=5)
    args = p.parse_args()
    print(f"{'C1':>4} {'all_freq':>10} {'full':>10} {'no_deepsup':>11} {'fpn':>10}  ordered")
    for r in parameter_ordering(args.widths, args.num_classes):
        print(f"{r['base_width']:>4} {r['all_freq']:>10} {r['full']:>10} {r['no_deepsup']:>11} "
              f"{r['fpn']:>10}  {r['ordered']}")


if __name__ == "__main__":
    main()
