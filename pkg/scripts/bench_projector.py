"""Projector timings and dense-equivalent memory figures.

Times projection-matrix construction, forward and back projection for a few
event counts (median of repeats) and prints the float32 dense operator
footprint for the full-size sinogram and list-mode settings. Absolute times
are hardware-bound; the ratio between event counts shows the linear scaling.

    python3 scripts/bench_projector.py --events 50000 100000 200000
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

from lmpet.cli import bench_rows, load_scanner
from lmpet.projector import Grid


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scanner", default="desk")
    parser.add_argument("--grid", type=int, default=32)
    parser.add_argument("--pixel-mm", type=float, default=1.5)
    parser.add_argument("--events", type=int, nargs="+", default=[50_000, 100_000, 200_000])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", type=Path, default=None, help="optional CSV path")
    args = parser.parse_args(argv)

    rows = bench_rows(load_scanner(args.scanner), Grid(args.grid, args.grid, args.pixel_mm),
                      args.events, args.repeat, seed=0, workers=args.threads)
    times = {}
    for r in rows:
        if r["kind"] == "time":
            n = int(r["dims"].split(";")[0][2:])
            times.setdefault(r["operation"], {})[n] = r["value"]
    print(f"{'operation':>10s} " + " ".join(f"{n:>12d}" for n in args.events) + "   ratio(last/first)")
    for op, by_n in times.items():
        vals = [by_n[n] for n in args.events]
        print(f"{op:>10s} " + " ".join(f"{v * 1e3:10.2f}ms" for v in vals) + f"   {vals[-1] / vals[0]:.2f}")
    print()
    for r in rows:
        if r["kind"] == "memory":
            print(f"{r['operation']:>10s} {r['dims']:>22s} {r['value']:8.2f} GiB")
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
