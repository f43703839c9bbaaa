"""Compiled kernels vs the pure-Python fallback.

    python benchmarks/compare_backends.py [--repeats N] [--seed S] [--json out.json]
"""

import argparse
import json

from lsmaudit import kernels
from lsmaudit.harness.bench import kernels_suite


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=15)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", help="also write the report here")
    args = parser.parse_args()

    if kernels.compiled_backend is None:
        print("compiled extension unavailable; only the python rows will be shown")
    report = kernels_suite(seed=args.seed, repeats=args.repeats)
    print(report.to_text())
    speedups = {w: 1 / r for w, r in report.ratios.get("compiled", {}).items() if r}
    for workload, s in sorted(speedups.items()):
        print(f"{workload:<12} compiled is {s:.1f}x faster (p50)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report.as_dict(), fh, indent=2)


if __name__ == "__main__":
    main()
