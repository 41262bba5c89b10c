#!/usr/bin/env python3
"""Benchmark the tracker against the plain shortest-path baseline on phantoms.

Generates a suite of synthetic bowel phantoms of increasing difficulty
(straight tube, single bend, folded with touching segments), runs both
methods end to end, and prints a metrics table per case.  Artifacts land
under --out so individual runs can be inspected or resumed afterwards.

Usage:
    python3 scripts/run_phantom_benchmark.py --out /tmp/bench
    python3 scripts/run_phantom_benchmark.py --out /tmp/bench --tolerance 5
"""

import argparse
import sys
import time
from pathlib import Path

from boweltrack.config import TrackingConfig
from boweltrack.phantom import PhantomSpec, generate_phantom
from boweltrack.pipeline import run_baseline, run_track
from boweltrack.volume_io import save_polyline, save_volume

CASES = [
    ("straight", PhantomSpec(dims=(64, 28, 28), spacing=(2.0, 2.0, 2.0),
                             inner_radius=12.0, bends=0, touch_pairs=0, seed=3)),
    ("bent", PhantomSpec(dims=(80, 64, 24), spacing=(2.0, 2.0, 2.0),
                         bends=1, touch_pairs=0, seed=7)),
    ("folded", PhantomSpec(dims=(96, 96, 24), spacing=(2.0, 2.0, 2.0),
                           bends=2, touch_pairs=1, seed=5)),
    ("folded-hard", PhantomSpec(dims=(128, 128, 56), spacing=(2.0, 2.0, 2.0),
                                bends=5, touch_pairs=3, seed=1)),
]

HEADER = (f"{'case':<12} {'method':<9} {'prec%':>6} {'rec%':>6} "
          f"{'c2c mm':>7} {'maxlen mm':>9} {'gt mm':>7} {'sec':>6}")


def run_case(name, spec, root, tolerance, quiet):
    case_dir = root / name
    case_dir.mkdir(parents=True, exist_ok=True)
    intensity, seg, gt = generate_phantom(spec)
    paths = {
        "intensity": case_dir / "intensity.vol",
        "segmentation": case_dir / "segmentation.vol",
        "gt": case_dir / "gt.poly",
    }
    save_volume(intensity, str(paths["intensity"]))
    save_volume(seg, str(paths["segmentation"]))
    save_polyline(gt, str(paths["gt"]))

    log = (lambda _msg: None) if quiet else (lambda msg: print(f"  {msg}", file=sys.stderr))
    rows = []
    for method, runner in (("baseline", run_baseline), ("proposed", run_track)):
        config = TrackingConfig(
            intensity_path=str(paths["intensity"]),
            segmentation_path=str(paths["segmentation"]),
            gt_path=str(paths["gt"]),
            start=tuple(gt.points[0]),
            end=tuple(gt.points[-1]),
            output_dir=str(case_dir / method),
            tolerance=tolerance,
        )
        t0 = time.perf_counter()
        result = runner(config, log=log)
        elapsed = time.perf_counter() - t0
        rep = result.report
        rows.append(f"{name:<12} {method:<9} {rep.precision:>6.1f} {rep.recall:>6.1f} "
                    f"{rep.curve_to_curve:>7.2f} {rep.max_len_no_error:>9.1f} "
                    f"{gt.arc_length():>7.1f} {elapsed:>6.1f}")
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="directory for phantom and run artifacts")
    parser.add_argument("--tolerance", type=float, default=10.0,
                        help="match tolerance in mm for the metrics (default: 10)")
    parser.add_argument("--cases", nargs="*", default=[name for name, _ in CASES],
                        help="subset of cases to run (default: all)")
    parser.add_argument("--quiet", action="store_true", help="suppress stage logs")
    args = parser.parse_args(argv)

    selected = [(n, s) for n, s in CASES if n in args.cases]
    unknown = set(args.cases) - {n for n, _ in CASES}
    if unknown:
        parser.error(f"unknown cases: {sorted(unknown)}")

    root = Path(args.out)
    print(HEADER)
    print("-" * len(HEADER))
    for name, spec in selected:
        for row in run_case(name, spec, root, args.tolerance, args.quiet):
            print(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
