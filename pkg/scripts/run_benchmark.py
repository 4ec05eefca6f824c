#!/usr/bin/env python3
"""Generate the benchmark dataset and run QK Iteration next to the in-batch
baseline on it.

    python3 scripts/run_benchmark.py --out runs/bench [--config scripts/benchmark.json]
"""

import argparse
import sys
from pathlib import Path

from qkiter import cli

HERE = Path(__file__).resolve().parent


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=str(HERE / "benchmark.json"))
    p.add_argument("--workers", default="1")
    args = p.parse_args()
    out = Path(args.out)
    data = str(out / "data")
    code = cli.main(["gen-data", "--config", args.config, "--out", data])
    if code:
        return code
    return cli.main(["-v", "compare", "--config", args.config, "--data", data,
                     "--out", str(out / "compare"), "--workers", args.workers])


if __name__ == "__main__":
    sys.exit(main())
