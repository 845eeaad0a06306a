"""Run every experiment at its default size and write reports under one directory."""
import argparse
import sys

from aht.cli import main as aht

EXPERIMENTS = ("exp1", "scalability", "exp2", "exp3")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int)
    ap.add_argument("--exp", nargs="*", default=list(EXPERIMENTS), choices=EXPERIMENTS)
    args = ap.parse_args()
    for exp in args.exp:
        argv = ["run", "--exp", exp, "--seed", str(args.seed), "--out", f"{args.out}/{exp}"]
        if args.trials:
            argv += ["--trials", str(args.trials)]
        code = aht(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
