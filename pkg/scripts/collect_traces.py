"""Record scripted-human trace files used to train the shipped behavior models."""
import argparse
from pathlib import Path

from aht.behavior import write_traces
from aht.simworld import WorldConfig, collect_traces, data_path


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=None)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default=str(data_path("traces")))
    ap.add_argument("--behaviors", nargs="*", default=None)
    args = ap.parse_args()
    cfg = WorldConfig.load(args.scenario)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for behavior in args.behaviors or sorted(cfg.human["behaviors"]):
        rows = collect_traces(cfg, behavior, args.steps, args.seed)
        write_traces(str(out / f"{behavior}.tsv"), rows)
        print(f"{behavior}: {len(rows)} rows")


if __name__ == "__main__":
    main()
