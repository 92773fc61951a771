"""Open-loop and closed-loop evaluation over grids of initial conditions.

Open loop: one solve per grid point and branching time; the baseline is the
same game with ``t_b = T`` (a single plan in expectation).

Closed loop: execute the method's plan through ``t_b``, then re-solve a
single-hypothesis game under the realized hypothesis from the reached state
over the remaining steps, and score the stitched trajectory. By default every
hypothesis is realized in turn and weighted by the belief.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

import contingency_games
from contingency_games.config import config_hash
from contingency_games.game import (
    ContingencyGame,
    EquilibriumSolution,
    GameKKT,
    build_kkt_mcp,
    expected_cost,
    solve_contingency_game,
    verify_equilibrium,
)
from contingency_games.scenarios import (
    ScenarioConfig,
    build_scenario,
)

CSV_SCHEMA_VERSION = 1
METHODS = ("contingency", "baseline")
METRICS = ("open_loop_cost", "closed_loop_cost", "progress", "mean_opponent_distance", "min_constraint")


@dataclass
class SweepPlan:
    config: ScenarioConfig
    points: Optional[list] = None  # grid positions of config.grid.agent
    branching_times: Optional[list] = None
    belief: Optional[list] = None
    methods: tuple = METHODS
    closed_loop_mode: str = "exhaustive"  # or "sampled"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        cfg = self.config
        if self.belief is not None:
            cfg = cfg.with_overrides([("belief", list(map(float, self.belief)))])
            self.config = cfg
        if self.points is None:
            self.points = cfg.grid.points().tolist()
        self.points = [[float(p[0]), float(p[1])] for p in self.points]
        if not self.points:
            raise ValueError("the grid of initial positions is empty")
        if self.branching_times is None:
            self.branching_times = list(cfg.branching_times)
        self.branching_times = [int(t) for t in self.branching_times]
        if any(not 0 <= t <= cfg.horizon for t in self.branching_times):
            raise ValueError("branching times must lie in [0, T]")
        if any(m not in METHODS for m in self.methods):
            raise ValueError(f"methods must be drawn from {METHODS}")
        if self.closed_loop_mode not in ("exhaustive", "sampled"):
            raise ValueError("closed_loop_mode must be exhaustive or sampled")

    def reduced(self, n: int) -> "SweepPlan":
        """Same sweep on ``n`` grid points spread evenly over the grid."""
        idx = np.unique(np.linspace(0, len(self.points) - 1, n).round().astype(int))
        return SweepPlan(
            self.config,
            [self.points[i] for i in idx],
            list(self.branching_times),
            None,
            self.methods,
            self.closed_loop_mode,
            self.seed,
            self.workers,
        )


@dataclass
class EpisodeRecord:
    scenario: str
    mode: str  # open_loop | closed_loop
    method: str
    t_b: int
    ic_id: int
    x: float
    y: float
    hypothesis: str  # realized hypothesis; "" for open-loop records
    weight: float  # belief weight of the realized hypothesis (1 when sampled)
    open_loop_cost: float
    closed_loop_cost: float
    progress: float
    mean_opponent_distance: float
    min_constraint: float
    converged: bool
    status: str
    iterations: int
    wall_time: float
    kkt_residual: float
    verified: bool = False  # every solve behind the record passed the KKT check


# ---------------------------------------------------------------------------
# metrics


def relative_cost_gap(j_base: float, j_ours: float) -> float:
    """``(J_base - J_ours) / J_base``."""
    if j_base == 0:
        raise ZeroDivisionError("relative gap undefined for a zero baseline cost")
    return (j_base - j_ours) / j_base


def _positions(states):
    return np.asarray(states)[:, :2]


def progress(ego_states) -> float:
    ego_states = np.asarray(ego_states)
    return float(ego_states[-1, 0] - ego_states[0, 0])


def mean_opponent_distance(states: Sequence) -> float:
    ego = _positions(states[0])
    d = np.stack([np.linalg.norm(ego - _positions(s), axis=1) for s in states[1:]])
    return float(np.mean(d.min(axis=0)))


def min_collision_value(game: ContingencyGame, k: int, states: Sequence, controls: Sequence) -> float:
    """Smallest collision-constraint value along a joint trajectory."""
    zs = [np.concatenate([x, u], axis=1).T for x, u in zip(states, controls)]
    vals = [np.min(np.asarray(sc.function(zs)[0], dtype=float)) for sc in game.shared_constraints[k]]
    return float(min(vals)) if vals else math.inf


def ego_cost(game: ContingencyGame, k: int, states, controls) -> float:
    zs = [np.concatenate([x, u], axis=1).T for x, u in zip(states, controls)]
    T = zs[0].shape[1]
    return float(np.sum(np.broadcast_to(game.ego.stage_cost(zs, np.arange(T)), (T,))))


# ---------------------------------------------------------------------------
# episodes


VERIFY_TOL = 1e-6


def _solve(game: ContingencyGame, cfg: ScenarioConfig, seed: int, kkt: Optional[GameKKT] = None, v0=None, warm=False):
    """Solve and attach a KKT verification; a warm start is tried first."""
    kkt = kkt if kkt is not None else build_kkt_mcp(game)
    kwargs = cfg.solver.solve_kwargs(seed)
    sol = None
    if warm:
        quick = replace(kwargs["opts"], smoothing=0.0, restart_attempts=0, max_iterations=20)
        sol = solve_contingency_game(game, opts=quick, kkt=kkt, v0=v0)
    if sol is None or not sol.converged:
        sol = solve_contingency_game(game, kkt=kkt, **kwargs)
    sol.verification = verify_equilibrium(game, sol, VERIFY_TOL, kkt=kkt)
    return sol


def _verified(sol: EquilibriumSolution) -> bool:
    return sol.verification is not None and sol.verification.passed


def _episode_game(cfg: ScenarioConfig, point, t_b: int) -> ContingencyGame:
    c = cfg.with_initial_position(cfg.grid.agent, point)
    return build_scenario(c).with_branching_time(t_b)


def _open_loop_record(cfg, game, sol: EquilibriumSolution, method, t_b, ic_id, point) -> EpisodeRecord:
    b = game.belief.probabilities
    prof = sol.profile
    prog = sum(b[k] * progress(prof.states[k][0]) for k in range(game.K))
    dist = sum(b[k] * mean_opponent_distance(prof.states[k]) for k in range(game.K))
    mins = [min_collision_value(game, k, prof.states[k], prof.controls[k]) for k in range(game.K) if b[k] > 0]
    return EpisodeRecord(
        cfg.scenario, "open_loop", method, t_b, ic_id, point[0], point[1], "", 1.0,
        expected_cost(game, prof), math.nan, prog, dist, min(mins),
        sol.converged, sol.solver.status.value, sol.solver.iterations, sol.solver.wall_time, sol.kkt_residual,
        _verified(sol),
    )


def tail_warm_start(kkt: GameKKT, v, k: int, t0: int, sub: GameKKT) -> np.ndarray:
    """Initial point for the hypothesis-``k`` subgame starting at step ``t0``
    taken from the tail of a full-horizon solution ``v``."""
    v = np.asarray(v)
    w = np.full(sub.dimension, 1e-2)
    b = kkt.game.belief.probabilities[k]
    for p in range(kkt.N):
        w[sub.x_idx[0][p]] = v[kkt.x_idx[k][p][t0:]]
        w[sub.u_idx[0][p]] = v[kkt.u_idx[k][p][t0:]]
        mu = v[kkt.mu_idx[k][p][t0:]]
        # the ego dynamics multipliers carry the branch probability
        w[sub.mu_idx[0][p]] = mu / b if (p == 0 and b > 0) else mu
        w[sub.lam_idx[0][p]] = v[kkt.lam_idx[k][p][t0:]]
    for s in range(len(kkt.game.shared_constraints[k])):
        w[sub.sh_idx[0][s]] = v[kkt.sh_idx[k][s][t0:]]
    return w


def _closed_loop(cfg, game, kkt, sol, method, t_b, ic_id, point, hypotheses, weights, seed):
    """Records for one closed-loop episode (one per realized hypothesis)."""
    T = game.horizon
    prof = sol.profile
    plan_cost = expected_cost(game, prof)
    out = []
    for k, wt in zip(hypotheses, weights):
        # the executed prefix comes from the branch of the realized hypothesis;
        # for the baseline there is only one ego plan but the others still
        # follow their own branch
        kp = k if game.K > 1 else 0
        states = [prof.states[kp][p] for p in range(kkt.N)]
        controls = [prof.controls[kp][p] for p in range(kkt.N)]
        full = game.restrict(kp)
        status, iters, wall, res, ok = sol.solver.status.value, sol.solver.iterations, sol.solver.wall_time, sol.kkt_residual, sol.converged
        verified = _verified(sol)
        if t_b < T:
            sub_game = full.with_initial_states([s[t_b] for s in states], horizon=T - t_b)
            sub_kkt = build_kkt_mcp(sub_game)
            v0 = tail_warm_start(kkt, sol.v, kp, t_b, sub_kkt)
            sub = _solve(sub_game, cfg, seed, kkt=sub_kkt, v0=v0, warm=True)
            states = [np.concatenate([s[:t_b], x], axis=0) for s, x in zip(states, sub.profile.states[0])]
            controls = [np.concatenate([u[:t_b], c], axis=0) for u, c in zip(controls, sub.profile.controls[0])]
            ok = ok and sub.converged
            verified = verified and _verified(sub)
            if not sub.converged:
                status = sub.solver.status.value
            iters += sub.solver.iterations
            wall += sub.solver.wall_time
            res = max(res, sub.kkt_residual)
        out.append(
            EpisodeRecord(
                cfg.scenario, "closed_loop", method, t_b, ic_id, point[0], point[1],
                game.belief.hypotheses[k], float(wt), plan_cost,
                ego_cost(full, 0, states, controls),
                progress(states[0]),
                mean_opponent_distance(states),
                min_collision_value(full, 0, states, controls),
                ok, status, iters, wall, res, verified,
            )
        )
    return out


def _realized(sweep: SweepPlan, cfg: ScenarioConfig, ic_id: int, t_b: int):
    b = np.asarray(cfg.belief, dtype=float)
    if sweep.closed_loop_mode == "exhaustive":
        ks = [k for k in range(len(b)) if b[k] > 0]
        return ks, [b[k] for k in ks]
    rng = np.random.default_rng([sweep.seed, ic_id, t_b])
    return [int(rng.choice(len(b), p=b))], [1.0]


def _point_job(args):
    """All episodes of one grid point (runs in a worker)."""
    cfg_dict, point, ic_id, t_bs, methods, closed, mode, seed = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    sub_plan = SweepPlan(cfg, [point], t_bs, None, methods, mode, seed)
    T = cfg.horizon
    cache = {}

    def solved(t_eff):
        if t_eff not in cache:
            game = _episode_game(cfg, point, t_eff)
            kkt = build_kkt_mcp(game)
            cache[t_eff] = (game, kkt, _solve(game, cfg, seed, kkt=kkt))
        return cache[t_eff]

    records = []
    for t_b in t_bs:
        for method in methods:
            game, kkt, sol = solved(t_b if method == "contingency" else T)
            records.append(_open_loop_record(cfg, game, sol, method, t_b, ic_id, point))
            if closed:
                ks, ws = _realized(sub_plan, cfg, ic_id, t_b)
                records += _closed_loop(cfg, game, kkt, sol, method, t_b, ic_id, point, ks, ws, seed)
    return records


def _run(sweep: SweepPlan, closed: bool) -> list[EpisodeRecord]:
    cfg_dict = sweep.config.to_dict()
    jobs = [
        (cfg_dict, p, i, sweep.branching_times, sweep.methods, closed, sweep.closed_loop_mode, sweep.seed)
        for i, p in enumerate(sweep.points)
    ]
    if sweep.workers > 1:
        with ProcessPoolExecutor(sweep.workers) as ex:
            chunks = list(ex.map(_point_job, jobs))
    else:
        chunks = [_point_job(j) for j in jobs]
    return [r for chunk in chunks for r in chunk]


def run_open_loop(sweep: SweepPlan) -> list[EpisodeRecord]:
    return _run(sweep, closed=False)


def run_closed_loop(sweep: SweepPlan) -> list[EpisodeRecord]:
    return [r for r in _run(sweep, closed=True) if r.mode == "closed_loop"]


def run_both(sweep: SweepPlan) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """Open- and closed-loop records from one pass; the open-loop plans are
    the very solves the closed-loop episodes start from."""
    records = _run(sweep, closed=True)
    return [r for r in records if r.mode == "open_loop"], [r for r in records if r.mode == "closed_loop"]


# ---------------------------------------------------------------------------
# aggregation


def _episode_key(r: EpisodeRecord):
    return (r.scenario, r.mode, r.method, r.t_b, r.ic_id)


def episodes(records: Sequence[EpisodeRecord]) -> dict:
    """Collapse per-hypothesis records into belief-weighted episode values.

    Returns ``{key: {"converged": bool, metric: value, ...}}``; the minimum
    constraint value is the minimum over realized hypotheses.
    """
    groups = defaultdict(list)
    for r in records:
        groups[_episode_key(r)].append(r)
    out = {}
    for key, rs in groups.items():
        total = sum(r.weight for r in rs)
        ep = {
            "converged": all(r.converged for r in rs),
            "verified": all(r.verified for r in rs),
            "x": rs[0].x,
            "y": rs[0].y,
        }
        for m in METRICS:
            vals = [getattr(r, m) for r in rs]
            if m == "min_constraint":
                ep[m] = float(min(vals))
            else:
                ep[m] = float(sum(r.weight * v for r, v in zip(rs, vals)) / total)
        out[key] = ep
    return out


def _mean_stderr(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def aggregate(records: Sequence[EpisodeRecord]) -> list[dict]:
    """Mean and standard error per scenario, mode, method and branching time.

    Failed episodes are excluded from the statistics and counted in
    ``failures``. A single episode has standard error 0.
    """
    if not records:
        raise ValueError("nothing to aggregate")
    eps = episodes(records)
    groups = defaultdict(list)
    for key, ep in eps.items():
        groups[key[:4]].append(ep)
    rows = []
    for (scenario, mode, method, t_b), group in sorted(groups.items()):
        ok = [e for e in group if e["converged"]]
        row = {"scenario": scenario, "mode": mode, "method": method, "t_b": t_b, "episodes": len(group), "failures": len(group) - len(ok)}
        for m in METRICS:
            mean, se = _mean_stderr([e[m] for e in ok if not math.isnan(e[m])])
            row[f"{m}_mean"], row[f"{m}_stderr"] = mean, se
        rows.append(row)
    return rows


def cost_gaps(records: Sequence[EpisodeRecord]) -> list[dict]:
    """Per-episode relative gap between baseline and contingency costs.

    Open-loop records use the plan cost, closed-loop records the realized
    cost. Episodes where either method failed are skipped.
    """
    eps = episodes(records)
    out = []
    for key, ep in sorted(eps.items()):
        scenario, mode, method, t_b, ic = key
        if method != "contingency":
            continue
        base = eps.get((scenario, mode, "baseline", t_b, ic))
        if base is None or not (ep["converged"] and base["converged"]):
            continue
        metric = "open_loop_cost" if mode == "open_loop" else "closed_loop_cost"
        out.append(
            {
                "scenario": scenario,
                "mode": mode,
                "t_b": t_b,
                "ic_id": ic,
                "x": ep["x"],
                "y": ep["y"],
                "baseline_cost": base[metric],
                "contingency_cost": ep[metric],
                "gap": relative_cost_gap(base[metric], ep[metric]),
            }
        )
    return out


# ---------------------------------------------------------------------------
# output


def provenance(cfg: ScenarioConfig) -> dict:
    return {"config_hash": config_hash(cfg), "version": contingency_games.__version__}


RECORD_COLUMNS = [f.name for f in fields(EpisodeRecord)]


def write_records_csv(records: Sequence[EpisodeRecord], path, cfg: ScenarioConfig) -> None:
    prov = provenance(cfg)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "config_hash", "version"] + RECORD_COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([CSV_SCHEMA_VERSION, prov["config_hash"], prov["version"]] + [d[c] for c in RECORD_COLUMNS])


def read_records_csv(path) -> list[EpisodeRecord]:
    types = {f.name: f.type for f in fields(EpisodeRecord)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for c in RECORD_COLUMNS:
                t, raw = types[c], row[c]
                if t in ("int", int):
                    kw[c] = int(raw)
                elif t in ("float", float):
                    kw[c] = float(raw)
                elif t in ("bool", bool):
                    kw[c] = raw == "True"
                else:
                    kw[c] = raw
            out.append(EpisodeRecord(**kw))
    return out


def _write_rows(path, rows, prov):
    if not rows:
        rows = []
    cols = ["config_hash", "version"] + (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([prov["config_hash"], prov["version"]] + list(r.values()))


def write_outputs(records: Sequence[EpisodeRecord], out_dir, cfg: ScenarioConfig, mode: str) -> dict:
    """Records CSV, JSON summary and plot-data CSVs for one sweep."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg)
    write_records_csv(records, out / f"{mode}_records.csv", cfg)
    table = aggregate(records)
    gaps = cost_gaps(records)
    by_tb = defaultdict(list)
    for g in gaps:
        by_tb[g["t_b"]].append(g["gap"])
    gap_summary = []
    for t_b in sorted(by_tb):
        mean, se = _mean_stderr(by_tb[t_b])
        gap_summary.append({"t_b": t_b, "gap_mean": mean, "gap_stderr": se, "episodes": len(by_tb[t_b])})
    summary = {**prov, "scenario": cfg.scenario, "mode": mode, "table": table, "relative_gap": gap_summary}
    (out / f"{mode}_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_rows(out / f"{mode}_gap_distribution.csv", [{"t_b": g["t_b"], "ic_id": g["ic_id"], "gap": g["gap"]} for g in gaps], prov)
    _write_rows(out / f"{mode}_gap_heatmap.csv", [{"t_b": g["t_b"], "x": g["x"], "y": g["y"], "gap": g["gap"]} for g in gaps], prov)
    return summary
