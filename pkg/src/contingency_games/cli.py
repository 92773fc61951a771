"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

import contingency_games
from contingency_games.config import ConfigError, config_hash
from contingency_games.eval import SweepPlan, provenance, run_closed_loop, run_open_loop, write_outputs
from contingency_games.game import (
    TrajectoryProfile,
    build_kkt_mcp,
    expected_cost,
    solve_contingency_game,
    verify_equilibrium,
)
from contingency_games.mcp import block_residual_norms, check_mcp_solution
from contingency_games.scenarios import SCENARIOS, build_scenario, default_config, load_config, save_config

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
VERIFY_TOL = 1e-6

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contingency-games", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=contingency_games.__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="scenario JSON config")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override (repeatable)")

    sp = sub.add_parser("emit-defaults", help="write the shipped default configs")
    sp.add_argument("--out", default=".")
    sp.add_argument("--scenario", choices=SCENARIOS + ("all",), default="all")

    sp = sub.add_parser("solve", help="solve one contingency game")
    common(sp)

    for name in ("sweep-open", "sweep-closed"):
        sp = sub.add_parser(name, help=f"{'open' if name == 'sweep-open' else 'closed'}-loop sweep")
        common(sp)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--tb-list", default=None, help="comma-separated branching times")
        sp.add_argument("--grid-points", type=int, default=None, help="use an evenly spread subset of the grid")

    sp = sub.add_parser("verify", help="re-check a stored solution against its config")
    common(sp)
    sp.add_argument("--solution", default=None, help="solution JSON (default: OUT/solution.json)")
    return p


def _load(args):
    return load_config(args.config, args.set)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")


def cmd_emit_defaults(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = SCENARIOS if args.scenario == "all" else (args.scenario,)
    for name in names:
        save_config(default_config(name), out / f"{name}.json")
        print(out / f"{name}.json")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load(args)
    game = build_scenario(cfg)
    kkt = build_kkt_mcp(game)
    sol = solve_contingency_game(game, kkt=kkt, **cfg.solver.solve_kwargs(args.seed))
    report = verify_equilibrium(game, sol, VERIFY_TOL, kkt=kkt)
    prov = provenance(cfg)
    out = Path(args.out)
    result = {
        **prov,
        "config": cfg.to_dict(),
        "status": sol.solver.status.value,
        "converged": sol.converged,
        "iterations": sol.solver.iterations,
        "wall_time": sol.solver.wall_time,
        "kkt_residual": sol.kkt_residual,
        "expected_cost": expected_cost(game, sol.profile),
        "profile": sol.profile.to_dict(),
        "rho": sol.rho.tolist(),
        "v": sol.v.tolist(),
    }
    _write_json(out / "solution.json", result)
    _write_json(
        out / "kkt_report.json",
        {**prov, **report.to_dict(), "block_residuals": block_residual_norms(kkt.mcp, sol.v)},
    )
    print(f"{sol.solver.status.value}: {sol.solver.iterations} iterations, residual {sol.kkt_residual:.2e}, "
          f"expected ego cost {result['expected_cost']:.6g}")
    if not sol.converged:
        worst = sorted(block_residual_norms(kkt.mcp, sol.v).items(), key=lambda kv: -kv[1])[:5]
        for name, val in worst:
            print(f"  {name}: {val:.3e}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load(args)
    path = Path(args.solution) if args.solution else Path(args.out) / "solution.json"
    try:
        stored = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read solution {path}: {exc}") from exc
    if stored.get("config_hash") != config_hash(cfg):
        print("solution was produced from a different config", file=sys.stderr)
        return EXIT_VERIFY
    game = build_scenario(cfg)
    kkt = build_kkt_mcp(game)
    v = np.asarray(stored["v"], dtype=float)
    if v.shape != (kkt.dimension,):
        print("solution vector does not match the game dimension", file=sys.stderr)
        return EXIT_VERIFY
    mcp_check = check_mcp_solution(kkt.mcp, v, VERIFY_TOL)
    report = verify_equilibrium(game, v, VERIFY_TOL, kkt=kkt)
    profile = TrajectoryProfile.from_dict(stored["profile"])
    same_profile = all(
        np.allclose(profile.states[k][p], kkt.unpack(v)[0].states[k][p]) for k in range(game.K) for p in range(game.n_players)
    )
    ok = bool(mcp_check) and report.passed and same_profile
    _write_json(
        Path(args.out) / "verify_report.json",
        {**provenance(cfg), "passed": ok, "mcp_check": bool(mcp_check), "profile_consistent": same_profile, **report.to_dict()},
    )
    print("verification passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def _sweep(args, closed: bool) -> int:
    cfg = _load(args)
    tbs = None
    if args.tb_list:
        try:
            tbs = [int(t) for t in args.tb_list.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"--tb-list: {exc}") from exc
    try:
        sweep = SweepPlan(cfg, branching_times=tbs, seed=args.seed, workers=max(1, args.workers))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.grid_points:
        sweep = sweep.reduced(args.grid_points)
    records = (run_closed_loop if closed else run_open_loop)(sweep)
    mode = "closed_loop" if closed else "open_loop"
    summary = write_outputs(records, args.out, sweep.config, mode)
    for row in summary["table"]:
        cost = row["closed_loop_cost_mean" if closed else "open_loop_cost_mean"]
        print(f"{row['method']:>12} t_b={row['t_b']:>3} cost={cost:.4f} failures={row['failures']}")
    return EXIT_OK


COMMANDS = {
    "emit-defaults": cmd_emit_defaults,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "sweep-open": lambda a: _sweep(a, False),
    "sweep-closed": lambda a: _sweep(a, True),
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
