"""Wall time of the nominal overtaking solve from the naive initial guess."""

import argparse
import statistics
import time

from contingency_games.game import build_kkt_mcp, solve_contingency_game
from contingency_games.scenarios import build_scenario, default_config


def bench(repeats: int = 10, t_b: int | None = None) -> list[float]:
    cfg = default_config("overtaking")
    game = build_scenario(cfg)
    if t_b is not None:
        game = game.with_branching_time(t_b)
    kkt = build_kkt_mcp(game)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        sol = solve_contingency_game(game, kkt=kkt, **cfg.solver.solve_kwargs())
        times.append(time.perf_counter() - start)
        if not sol.converged:
            raise RuntimeError(f"overtaking solve did not converge: {sol.solver.status.value}")
    return times


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--tb", type=int, default=None)
    args = ap.parse_args()
    times = bench(args.repeats, args.tb)
    print(f"median {1e3 * statistics.median(times):.1f} ms over {len(times)} solves "
          f"(min {1e3 * min(times):.1f}, max {1e3 * max(times):.1f})")


if __name__ == "__main__":
    main()
