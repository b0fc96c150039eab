"""Matched versus mismatched merge arithmetic on both synthetic structures.

For each world the script reports the best-t error of every merge variant
against the ground truth, normalized by the matched rule's error.
"""

import argparse

from xlmerge.synthetic import SyntheticSpec, run_experiment


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--sigma", type=float, default=0.01)
    parser.add_argument("--n", type=int, default=64)
    args = parser.parse_args()

    for structure in ("additive", "multiplicative"):
        print(f"== {structure} world, sigma={args.sigma:g}")
        for seed in range(args.seeds):
            report = run_experiment(SyntheticSpec(structure=structure, sigma=args.sigma, n=args.n, seed=seed))
            base = report.curves[report.primary]["best_truth_error"]
            cells = [
                f"{name}={c['best_truth_error'] / base:7.1f}x (t={c['best_t']:g})" for name, c in report.curves.items()
            ]
            print(f"  seed {seed}: " + "  ".join(cells))


if __name__ == "__main__":
    main()
