#!/usr/bin/env python3
"""Emit the quadratic-vs-linear scaling report for attention and the scan."""

import argparse
from pathlib import Path

from demansia.cli import main as cli_main


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="reports")
    ap.add_argument("--lengths", type=int, nargs="+", default=[64, 128, 256, 512, 1024])
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lengths = [str(n) for n in args.lengths]
    for kind in ("attention", "scan"):
        rc = cli_main(["bench", kind, "--lengths", *lengths, "--csv", str(out / f"{kind}.csv")])
        if rc != 0:
            raise SystemExit(rc)


if __name__ == "__main__":
    main()
