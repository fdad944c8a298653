#!/usr/bin/env python3
"""Run the desk-scale experiment matrix and cache results for the test suite.

Seven training configurations, three seeds each, on the 4-domain synthetic
registry. Completed cells are cached in the results file and skipped on
rerun, so an interrupted invocation picks up where it stopped. Expect
roughly 5 minutes per cell on one CPU core.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from dgseg.experiments import (
    DESK_SEEDS,
    MATRIX,
    load_results,
    matrix_hash,
    missing_cells,
    pseudo_quality_by_domain,
    run_matrix,
    summary_rows,
)
from dgseg.plots import plot_ablation, plot_pseudo_quality


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out",
        type=Path,
        default=Path("runs/acceptance/results.json"),
        help="results cache (default: runs/acceptance/results.json)",
    )
    parser.add_argument(
        "--plots",
        type=Path,
        default=None,
        help="directory for summary plots (default: next to --out)",
    )
    parser.add_argument("--quiet", action="store_true", help="no per-run progress")
    args = parser.parse_args()

    cached = load_results(args.out)
    todo = missing_cells(cached)
    print(f"matrix {matrix_hash()}: {len(MATRIX)} configurations x {len(DESK_SEEDS)} seeds")
    print(f"{len(todo)} cells to run, {sum(len(v) for v in cached['runs'].values())} cached")

    start = time.time()
    last_cell = [None]

    def progress(name, seed, record):
        if args.quiet:
            return
        cell = (name, seed)
        if cell != last_cell[0]:
            last_cell[0] = cell
            print(f"[{time.time() - start:7.0f}s] {name} seed {seed} started", flush=True)
        it = record["iteration"]
        if "unseen_dice" in record:
            print(
                f"[{time.time() - start:7.0f}s] {name} seed {seed} "
                f"iter {it}: unseen dice {record['unseen_dice']:.2f}",
                flush=True,
            )
        elif it % 100 == 0:
            print(
                f"[{time.time() - start:7.0f}s] {name} seed {seed} "
                f"iter {it}: total {record['total']:.4f} mask {record['mask_rate']:.2f}",
                flush=True,
            )

    results = run_matrix(args.out, progress=progress)

    print("\nconfiguration            mean dice   seed spread/2")
    rows = summary_rows(results)
    for name, mean, half_spread in rows:
        print(f"{name:<24} {mean:9.2f}   {half_spread:.2f}")

    plots_dir = args.plots or args.out.parent / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    plot_ablation(rows, plots_dir / "matrix_dice.png")
    quality = pseudo_quality_by_domain(results)
    plot_pseudo_quality(
        [(f"domain{d}", ind, mixed) for d, (ind, mixed) in quality.items()],
        plots_dir / "pseudo_quality.png",
    )
    print(f"\nplots written to {plots_dir}")
    print(f"results cached in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
