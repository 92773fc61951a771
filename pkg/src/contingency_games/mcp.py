"""Mixed complementarity problems and a semismooth Newton solver.

Problem: find ``v`` in the box ``[lower, upper]`` such that for every ``j``

* ``v_j == lower_j`` and ``G_j(v) >= 0``, or
* ``lower_j < v_j < upper_j`` and ``G_j(v) == 0``, or
* ``v_j == upper_j`` and ``G_j(v) <= 0``.

The solver rewrites the conditions as the nonsmooth equation
``Phi(v) = 0`` built from the Fischer-Burmeister function and applies a
damped Newton method on the generalized Jacobian, with an Armijo line search
on ``0.5 * ||Phi||^2``, diagonal regularization when the Newton matrix is
singular and a gradient fallback when the Newton step is not a descent
direction. None of the defaults in :class:`SolverOptions` come from a
reference implementation; they are our own choices.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolveStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    SINGULAR_JACOBIAN = "singular_jacobian"
    LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass(frozen=True)
class MixedComplementarityProblem:
    """``G``, its Jacobian and the box bounds.

    ``jacobian`` may return a dense array or a scipy sparse matrix; for sparse
    problems its pattern must not depend on ``v``. ``residual_and_jacobian``
    is an optional fused evaluation that the solver prefers when present.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    jacobian: Callable[[np.ndarray], object]
    block_labels: tuple = ()
    residual_and_jacobian: Optional[Callable] = None

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        up = np.asarray(self.upper, dtype=float)
        if lo.shape != up.shape or lo.ndim != 1:
            raise ValueError("bounds must be vectors of equal length")
        if not np.all(lo < up):
            bad = np.flatnonzero(~(lo < up))
            raise ValueError(f"need lower < upper componentwise; violated at {bad[:10]}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def dimension(self) -> int:
        return self.lower.size

    def evaluate(self, v):
        if self.residual_and_jacobian is not None:
            return self.residual_and_jacobian(v)
        return self.residual(v), self.jacobian(v)


@dataclass(frozen=True)
class SolverOptions:
    residual_tolerance: float = 1e-8
    max_iterations: int = 200
    line_search_contraction: float = 0.5
    armijo_slope: float = 1e-4
    regularization_floor: float = 1e-10
    restart_attempts: int = 2
    max_line_search_steps: int = 40
    seed: int = 0
    # rows with a finite lower bound only: once G_j >= -guard, a trial step
    # may not push it below -guard (inf disables the check)
    feasibility_guard: float = np.inf
    # initial smoothing of the complementarity map (0 = plain semismooth Newton)
    smoothing: float = 0.0
    smoothing_decrease: float = 0.2
    smoothing_floor: float = 1e-6

    def __post_init__(self):
        if not self.residual_tolerance > 0:
            raise ValueError("residual_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.line_search_contraction < 1:
            raise ValueError("line_search_contraction must lie in (0, 1)")
        if not 0 < self.armijo_slope < 1:
            raise ValueError("armijo_slope must lie in (0, 1)")
        if self.regularization_floor < 0:
            raise ValueError("regularization_floor must be >= 0")
        if self.restart_attempts < 0:
            raise ValueError("restart_attempts must be >= 0")
        if self.smoothing < 0 or self.smoothing_floor <= 0:
            raise ValueError("smoothing must be >= 0 and smoothing_floor > 0")
        if not 0 < self.smoothing_decrease < 1:
            raise ValueError("smoothing_decrease must lie in (0, 1)")
        if not self.feasibility_guard > 0:
            raise ValueError("feasibility_guard must be positive")


@dataclass
class SolveResult:
    solution: np.ndarray
    status: SolveStatus
    merit_norm: float
    iterations: int
    wall_time: float
    natural_residual: float = np.inf
    merit_history: list = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == SolveStatus.CONVERGED


# ---------------------------------------------------------------------------
# Fischer-Burmeister machinery

_CORNER = 1.0 - 1.0 / np.sqrt(2.0)


def _phi(a, b, eps=0.0):
    """FB function and its partials; at the origin an element of the
    generalized gradient is picked. ``eps > 0`` gives the smoothed variant
    whose roots satisfy ``a, b > 0`` and ``a * b = eps**2``."""
    r = np.hypot(a, b) if eps == 0.0 else np.sqrt(a * a + b * b + 2.0 * eps * eps)
    val = a + b - r
    safe = r > 0
    rr = np.where(safe, r, 1.0)
    da = np.where(safe, 1.0 - a / rr, _CORNER)
    db = np.where(safe, 1.0 - b / rr, _CORNER)
    return val, da, db


def _bound_kinds(lower, upper):
    has_lo = np.isfinite(lower)
    has_up = np.isfinite(upper)
    return has_lo & ~has_up, ~has_lo & has_up, has_lo & has_up


def _fb_from_g(lower, upper, v, g, eps=0.0):
    """Componentwise FB residual ``Phi`` with ``dPhi/dv`` and ``dPhi/dG``."""
    lo_only, up_only, both = _bound_kinds(lower, upper)
    phi = g.astype(float).copy()
    dv = np.zeros_like(phi)
    dg = np.ones_like(phi)

    if lo_only.any():
        val, da, db = _phi(v[lo_only] - lower[lo_only], g[lo_only], eps)
        phi[lo_only], dv[lo_only], dg[lo_only] = val, da, db
    if up_only.any():
        val, da, db = _phi(upper[up_only] - v[up_only], -g[up_only], eps)
        phi[up_only], dv[up_only], dg[up_only] = -val, da, db
    if both.any():
        inner, ia, ib = _phi(upper[both] - v[both], -g[both], eps)
        val, oa, ob = _phi(v[both] - lower[both], -inner, eps)
        phi[both] = val
        dv[both] = oa + ob * ia
        dg[both] = ob * ib
    return phi, dv, dg


def fb_residual(problem: MixedComplementarityProblem, v) -> np.ndarray:
    """Fischer-Burmeister residual; zero exactly at MCP solutions and equal to
    ``G`` on components without bounds."""
    v = np.asarray(v, dtype=float)
    return _fb_from_g(problem.lower, problem.upper, v, problem.residual(v))[0]


def natural_residual(lower, upper, v, g) -> np.ndarray:
    """Min-map residual ``v - clip(v - G, lower, upper)``."""
    return v - np.clip(v - g, lower, upper)


@dataclass
class SolutionCheck:
    ok: bool
    component_ok: np.ndarray
    clause: np.ndarray  # 0 lower, 1 interior, 2 upper, -1 none
    bound_violation: np.ndarray
    sign_violation: np.ndarray

    def __bool__(self):
        return self.ok

    def failures(self) -> np.ndarray:
        return np.flatnonzero(~self.component_ok)


def check_mcp_solution(problem: MixedComplementarityProblem, v, tol: float = 1e-8) -> SolutionCheck:
    """Evaluate the three MCP clauses componentwise within ``tol``."""
    v = np.asarray(v, dtype=float)
    return _classify(problem.lower, problem.upper, v, problem.residual(v), tol)


def _classify(lo, up, v, g, tol):
    bound_violation = np.maximum.reduce([lo - v, v - up, np.zeros_like(v)])
    in_box = bound_violation <= tol
    at_lo = np.isfinite(lo) & (np.abs(v - lo) <= tol)
    at_up = np.isfinite(up) & (np.abs(v - up) <= tol)
    lower_ok = at_lo & (g >= -tol)
    interior_ok = in_box & (np.abs(g) <= tol)
    upper_ok = at_up & (g <= tol)
    clause = np.full(v.shape, -1)
    clause[upper_ok] = 2
    clause[lower_ok] = 0
    clause[interior_ok] = 1
    ok = in_box & (lower_ok | interior_ok | upper_ok)
    # how far the best clause is from holding
    sign_violation = np.minimum.reduce(
        [
            np.where(np.isfinite(lo), np.maximum(np.abs(v - lo), np.maximum(-g, 0)), np.inf),
            np.abs(g),
            np.where(np.isfinite(up), np.maximum(np.abs(v - up), np.maximum(g, 0)), np.inf),
        ]
    )
    return SolutionCheck(bool(ok.all()), ok, clause, bound_violation, sign_violation)


# ---------------------------------------------------------------------------
# linear algebra


class _Singular(Exception):
    pass


def _newton_matrix(J, dv, dg):
    if sp.issparse(J):
        return (sp.diags(dg) @ J + sp.diags(dv)).tocsc()
    return dg[:, None] * np.asarray(J) + np.diag(dv)


def _solve_linear(H, rhs, mu):
    n = rhs.size
    if sp.issparse(H):
        A = H if mu == 0 else (H + mu * sp.identity(n, format="csc")).tocsc()
        try:
            lu = spla.splu(A, permc_spec="COLAMD", diag_pivot_thresh=0.1)
        except RuntimeError as exc:
            raise _Singular(str(exc)) from exc
        d = lu.solve(rhs)
        Ad = A @ d
    else:
        A = H if mu == 0 else H + mu * np.eye(n)
        try:
            with np.errstate(all="ignore"):
                lu = sla.lu_factor(A, check_finite=False)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise _Singular(str(exc)) from exc
        if np.any(np.abs(np.diag(lu[0])) < 1e-300):
            raise _Singular("zero pivot")
        d = sla.lu_solve(lu, rhs, check_finite=False)
        Ad = A @ d
    if not np.all(np.isfinite(d)):
        raise _Singular("non-finite step")
    if np.linalg.norm(Ad - rhs) > 1e-6 * max(1.0, np.linalg.norm(rhs)):
        raise _Singular("inaccurate factorization")
    return d


def _newton_direction(H, phi, grad, opts, size_scale):
    """Newton direction with escalating diagonal regularization.

    Returns ``(direction, used_newton)``; ``None`` when every attempt failed.
    """
    mu = 0.0
    floor = max(opts.regularization_floor, 1e-12)
    for _ in range(30):
        try:
            d = _solve_linear(H, -phi, mu)
        except _Singular:
            d = None
        if d is not None:
            dn = np.linalg.norm(d)
            slope = grad @ d
            if dn <= 1e8 * size_scale and slope < -1e-12 * dn * dn:
                return d
        mu = floor if mu == 0.0 else mu * 10.0
        if mu > 1e6:
            break
    return None


# ---------------------------------------------------------------------------
# solver


def _next_smoothing(eps, opts):
    eps = eps * opts.smoothing_decrease
    return eps if eps >= opts.smoothing_floor else 0.0


def solve_mcp(
    problem: MixedComplementarityProblem,
    v0,
    opts: SolverOptions = SolverOptions(),
) -> SolveResult:
    """Semismooth Newton on the Fischer-Burmeister reformulation.

    With ``opts.smoothing > 0`` the solver first follows the smoothed systems
    ``Phi_eps = 0`` for a decreasing sequence of ``eps`` and finishes with the
    exact reformulation. ``merit_history`` holds the norm of the residual the
    line search worked on, so it is monotone within each ``eps`` stage.
    """
    start = time.perf_counter()
    lo, up = problem.lower, problem.upper
    v = np.clip(np.asarray(v0, dtype=float).copy(), lo, up)
    rng = np.random.default_rng(opts.seed)
    bounded = np.isfinite(lo) | np.isfinite(up)
    guard = opts.feasibility_guard
    guarded = np.isfinite(lo) & ~np.isfinite(up) if np.isfinite(guard) else None

    history = []
    total_iters = 0
    restarts_left = opts.restart_attempts
    status = SolveStatus.MAX_ITERATIONS
    best = None
    eps = opts.smoothing

    g, J = problem.evaluate(v)
    while True:
        failure = None
        while True:
            phi, dv, dg = _fb_from_g(lo, up, v, g)
            true_merit = 0.5 * phi @ phi
            fb_norm = np.max(np.abs(phi)) if phi.size else 0.0
            nat = natural_residual(lo, up, v, g)
            nat_norm = np.max(np.abs(nat)) if nat.size else 0.0
            if best is None or true_merit < best[0]:
                best = (true_merit, v.copy())
            if max(fb_norm, nat_norm) <= opts.residual_tolerance:
                status = SolveStatus.CONVERGED
                history.append(float(np.sqrt(2.0 * true_merit)))
                break
            if eps > 0.0:
                phi, dv, dg = _fb_from_g(lo, up, v, g, eps)
                if np.max(np.abs(phi)) <= eps:
                    eps = _next_smoothing(eps, opts)
                    continue
            merit = 0.5 * phi @ phi
            history.append(float(np.sqrt(2.0 * merit)))
            if total_iters >= opts.max_iterations:
                status = SolveStatus.MAX_ITERATIONS
                break
            total_iters += 1

            H = _newton_matrix(J, dv, dg)
            grad = H.T @ phi
            scale = 1.0 + np.linalg.norm(v)
            d = _newton_direction(H, phi, grad, opts, scale)
            if d is None:
                # steepest descent on the merit function as the last resort
                gn = np.linalg.norm(grad)
                if gn == 0.0 or not np.isfinite(gn):
                    failure = SolveStatus.SINGULAR_JACOBIAN
                    break
                d = -grad * min(1.0, scale / gn)
            slope = grad @ d

            step = 1.0
            accepted = False
            watch = guarded & (g >= -guard) if guarded is not None else None
            for _ in range(opts.max_line_search_steps):
                trial = v + step * d
                g_trial = problem.residual(trial)
                ok = np.all(np.isfinite(g_trial))
                if ok and watch is not None:
                    ok = not np.any(g_trial[watch] < -guard)
                if ok:
                    phi_t = _fb_from_g(lo, up, trial, g_trial, eps)[0]
                    if 0.5 * phi_t @ phi_t <= merit + opts.armijo_slope * step * slope:
                        accepted = True
                        break
                step *= opts.line_search_contraction
            if not accepted:
                if eps > 0.0:
                    eps = _next_smoothing(eps, opts)
                    continue
                failure = SolveStatus.LINE_SEARCH_FAILURE
                break
            v = trial
            g, J = problem.evaluate(v)

        if status == SolveStatus.CONVERGED or failure is None:
            break
        status = failure
        if restarts_left <= 0 or total_iters >= opts.max_iterations:
            break
        restarts_left -= 1
        # restart from the best point with perturbed bounded components
        v = best[1].copy()
        noise = rng.uniform(0.0, 1.0, size=v.shape) * (1e-2 + 0.1 * np.abs(v))
        v[bounded] = np.clip(v[bounded] + noise[bounded], lo[bounded], up[bounded])
        eps = 1e-2 * opts.smoothing
        g, J = problem.evaluate(v)

    if status != SolveStatus.CONVERGED and best is not None:
        v = best[1]
        g = problem.residual(v)
    phi = _fb_from_g(lo, up, v, g)[0]
    fb_norm = float(np.max(np.abs(phi))) if phi.size else 0.0
    nat_norm = float(np.max(np.abs(natural_residual(lo, up, v, g)))) if phi.size else 0.0
    return SolveResult(
        solution=v,
        status=status,
        merit_norm=fb_norm,
        iterations=total_iters,
        wall_time=time.perf_counter() - start,
        natural_residual=nat_norm,
        merit_history=history,
    )


# ---------------------------------------------------------------------------
# test oracle


def solve_lcp_bruteforce(M, q, lower=None, upper=None, tol: float = 1e-10) -> list[np.ndarray]:
    """All solutions of the box-constrained LCP ``G(v) = M v + q``.

    Enumerates every assignment of each component to {at lower, interior,
    at upper}, solves the induced linear system for the interior block and
    keeps the assignments that satisfy the MCP conditions to ``tol``.
    """
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q.size
    if d > 12:
        raise ValueError("enumeration limited to d <= 12")
    lo = np.zeros(d) if lower is None else np.asarray(lower, dtype=float)
    up = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=float)

    options = []
    for j in range(d):
        opts_j = [1]
        if np.isfinite(lo[j]):
            opts_j.append(0)
        if np.isfinite(up[j]):
            opts_j.append(2)
        options.append(opts_j)

    found: list[np.ndarray] = []
    for assign in itertools.product(*options):
        assign = np.array(assign)
        v = np.where(assign == 0, lo, np.where(assign == 2, up, 0.0))
        free = assign == 1
        fixed = ~free
        if free.any():
            A = M[np.ix_(free, free)]
            rhs = -(q[free] + M[np.ix_(free, fixed)] @ v[fixed])
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.allclose(A @ sol, rhs, atol=tol, rtol=0):
                continue
            v[free] = sol
        g = M @ v + q
        if not np.all(np.isfinite(v)):
            continue
        if np.any(v[free] <= lo[free]) or np.any(v[free] >= up[free]):
            continue
        if np.any(np.abs(g[free]) > tol):
            continue
        if np.any(g[assign == 0] < -tol) or np.any(g[assign == 2] > tol):
            continue
        if not any(np.allclose(v, w, atol=1e-9, rtol=0) for w in found):
            found.append(v)
    return found


def linear_mcp(M, q, lower=None, upper=None, sparse: bool = False) -> MixedComplementarityProblem:
    """MCP with affine ``G(v) = M v + q``; bounds default to ``[0, inf)``."""
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q.size
    lo = np.zeros(d) if lower is None else np.asarray(lower, dtype=float)
    up = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=float)
    Jm = sp.csc_matrix(M) if sparse else M
    return MixedComplementarityProblem(
        residual=lambda v: M @ v + q,
        lower=lo,
        upper=up,
        jacobian=lambda v: Jm,
    )


# ---------------------------------------------------------------------------
# solution dump for the ``verify`` command


def block_residual_norms(problem: MixedComplementarityProblem, v) -> dict[str, float]:
    v = np.asarray(v, dtype=float)
    g = problem.residual(v)
    phi = _fb_from_g(problem.lower, problem.upper, v, g)[0]
    out = {}
    for name, sl in problem.block_labels:
        part = phi[sl]
        out[name] = float(np.max(np.abs(part))) if part.size else 0.0
    return out


def dump_solution(problem: MixedComplementarityProblem, v, path=None) -> dict:
    """JSON-ready record of ``v``, ``G(v)``, the block labels and per-block
    FB residual norms; written to ``path`` when given."""
    v = np.asarray(v, dtype=float)
    g = problem.residual(v)
    record = {
        "v": v.tolist(),
        "G": g.tolist(),
        "block_labels": [[name, sl.start, sl.stop] for name, sl in problem.block_labels],
        "block_residual_norms": block_residual_norms(problem, v),
    }
    if path is not None:
        Path(path).write_text(json.dumps(record))
    return record
