"""Regenerate the mock completion table shipped with the package."""
import argparse

from aht.mocks import write_mock
from aht.simworld import WorldConfig, data_path


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=None)
    ap.add_argument("--out", default=str(data_path("mock_llm.json")))
    args = ap.parse_args()
    n = write_mock(WorldConfig.load(args.scenario), args.out)
    print(f"wrote {n} records to {args.out}")


if __name__ == "__main__":
    main()
