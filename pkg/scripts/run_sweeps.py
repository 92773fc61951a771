"""Open- and closed-loop sweeps for both scenarios with a printed summary.

Example::

    python3 scripts/run_sweeps.py --out results --grid-points 20
"""

import argparse
import time
from pathlib import Path

from contingency_games.eval import SweepPlan, run_both, run_closed_loop, run_open_loop, write_outputs
from contingency_games.scenarios import SCENARIOS, default_config, load_config

# published closed-loop means (contingency, baseline); shown for orientation only
REFERENCE = {"jaywalking": (6.281, 7.512), "overtaking": (1.0809, 1.6334)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--scenario", choices=SCENARIOS + ("all",), default="all")
    ap.add_argument("--config", default=None, help="config file (single scenario only)")
    ap.add_argument("--mode", choices=("open", "closed", "both"), default="both")
    ap.add_argument("--grid-points", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    names = SCENARIOS if args.scenario == "all" else (args.scenario,)
    for name in names:
        cfg = load_config(args.config) if args.config else default_config(name)
        sweep = SweepPlan(cfg, workers=args.workers)
        if args.grid_points:
            sweep = sweep.reduced(args.grid_points)
        start = time.perf_counter()
        if args.mode == "both":
            open_rows, closed_rows = run_both(sweep)
            batches = [("open", open_rows), ("closed", closed_rows)]
        elif args.mode == "open":
            batches = [("open", run_open_loop(sweep))]
        else:
            batches = [("closed", run_closed_loop(sweep))]
        print(f"\n{name}: {len(sweep.points)} points, {time.perf_counter() - start:.0f} s")
        for mode, records in batches:
            label = f"{mode}_loop"
            summary = write_outputs(records, Path(args.out) / name, sweep.config, label)
            print(f"{label}:")
            metric = f"{label}_cost_mean"
            for row in summary["table"]:
                print(f"  {row['method']:>12} t_b={row['t_b']:>3}  cost {row[metric]:9.4f}  failures {row['failures']}")
            for g in summary["relative_gap"]:
                print(f"  gap t_b={g['t_b']:>3}  {g['gap_mean']:+.4f} +- {g['gap_stderr']:.4f}")
            if mode == "closed":
                ours, base = REFERENCE[name]
                print(f"  published reference: contingency {ours} vs baseline {base}")


if __name__ == "__main__":
    main()
