"""Contingency games and their KKT system as a mixed complementarity problem.

A contingency game couples an ego player, who keeps one trajectory per intent
hypothesis, with one copy of every other player per hypothesis. The ego plans
must share their first ``branching_time`` controls.

KKT layout (one block per hypothesis, then the contingency block)::

    [ z_ego, z_1, ..., z_{N-1},                 free
      mu_ego, lam_ego, lam_shared(owned by ego)  mu free, lam >= 0
      mu_1,   lam_1,   lam_shared(owned by 1)
      ... ]  per hypothesis
    rho                                          free

``z`` holds states ``x_1..x_T`` followed by controls ``u_1..u_T``. Dynamics
enter as equality constraints ``x_1 - x_hat = 0`` and
``x_{t+1} - f(x_t, u_t) = 0`` with free multipliers ``mu``.

Two conventions worth knowing:

* The ego Lagrangian weights each hypothesis branch by its probability,
  ``b(theta) * (J - lam' h)``, so the ego multipliers stored in ``v`` are
  per unit probability. For ``b(theta) > 0`` this is a rescaling of the usual
  multipliers and changes nothing about the ego's own conditions.
* A shared constraint keeps a single multiplier ``lam`` owned by its
  lowest-index participant. Player ``p`` uses ``w_p * kappa_p / kappa_ref * lam``
  where ``w_p`` is the branch weight above (1 for non-ego players). Fixing the
  ratio against the normalized ego multiplier makes the ``t_b = 0`` split and
  the degenerate-belief reduction exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from contingency_games import autodiff as ad
from contingency_games.dynamics import rollout_states
from contingency_games.mcp import (
    MixedComplementarityProblem,
    SolveResult,
    SolverOptions,
    solve_mcp,
)


class GameConstructionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model types


@dataclass(frozen=True)
class PlayerModel:
    """One agent.

    ``dynamics(x, u)`` returns the next state. ``stage_cost(zs, t)`` receives
    the stage vectors ``zs[i] = (x_i, u_i)`` of every player in the same
    hypothesis and the time index; with batched evaluation each entry is an
    array over time. ``private_constraints`` are functions of the player's own
    stage vector returning a sequence of values required to be ``>= 0``.
    """

    state_dim: int
    control_dim: int
    dynamics: Callable
    initial_state: np.ndarray
    stage_cost: Callable
    private_constraints: tuple = ()
    name: str = ""

    def __post_init__(self):
        x0 = np.asarray(self.initial_state, dtype=float)
        if x0.shape != (self.state_dim,):
            raise GameConstructionError(
                f"{self.name or 'player'}: initial state has shape {x0.shape}, "
                f"expected ({self.state_dim},)"
            )
        object.__setattr__(self, "initial_state", x0)
        object.__setattr__(self, "private_constraints", tuple(self.private_constraints))
        probe = self.dynamics(x0, np.zeros(self.control_dim))
        if len(probe) != self.state_dim:
            raise GameConstructionError(f"{self.name or 'player'}: dynamics output length mismatch")

    @property
    def stage_dim(self):
        return self.state_dim + self.control_dim


@dataclass(frozen=True)
class SharedConstraint:
    """Joint inequality ``function(zs) >= 0`` owned by several players.

    ``multiplier_ratio`` maps participating player index to its weight kappa;
    player ``p`` carries ``kappa_p / kappa_ref`` times the multiplier of the
    lowest-index participant ``ref``.
    """

    function: Callable
    multiplier_ratio: Mapping[int, float]
    name: str = ""

    def __post_init__(self):
        ratio = {int(k): float(v) for k, v in dict(self.multiplier_ratio).items()}
        if len(ratio) < 2:
            raise GameConstructionError("a shared constraint needs at least two players")
        if any(not v > 0 for v in ratio.values()):
            raise GameConstructionError("multiplier ratios must be positive")
        object.__setattr__(self, "multiplier_ratio", ratio)

    @property
    def players(self) -> tuple[int, ...]:
        return tuple(sorted(self.multiplier_ratio))

    @property
    def owner(self) -> int:
        return self.players[0]

    def relative_weight(self, player: int) -> float:
        return self.multiplier_ratio[player] / self.multiplier_ratio[self.owner]


@dataclass(frozen=True)
class Belief:
    hypotheses: tuple
    probabilities: np.ndarray

    def __post_init__(self):
        hyps = tuple(str(h) for h in self.hypotheses)
        b = np.asarray(self.probabilities, dtype=float)
        if len(hyps) < 1:
            raise GameConstructionError("belief needs at least one hypothesis")
        if len(set(hyps)) != len(hyps):
            raise GameConstructionError("hypothesis labels must be unique")
        if b.shape != (len(hyps),):
            raise GameConstructionError("one probability per hypothesis required")
        if np.any(b < 0) or abs(b.sum() - 1.0) > 1e-12:
            raise GameConstructionError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "hypotheses", hyps)
        object.__setattr__(self, "probabilities", b)

    @property
    def K(self) -> int:
        return len(self.hypotheses)

    def index(self, label) -> int:
        return self.hypotheses.index(str(label))


@dataclass(frozen=True)
class ContingencyGame:
    ego: PlayerModel
    others: tuple  # per hypothesis: tuple of PlayerModel
    shared_constraints: tuple  # per hypothesis: tuple of SharedConstraint
    belief: Belief
    branching_time: int
    horizon: int
    dt: float = 0.2

    def __post_init__(self):
        others = tuple(tuple(o) for o in self.others)
        shared = tuple(tuple(s) for s in self.shared_constraints)
        object.__setattr__(self, "others", others)
        object.__setattr__(self, "shared_constraints", shared)
        K = self.belief.K
        if len(others) != K or len(shared) != K:
            raise GameConstructionError("others/shared_constraints need one entry per hypothesis")
        if self.horizon < 1:
            raise GameConstructionError("horizon must be positive")
        if not 0 <= self.branching_time <= self.horizon:
            raise GameConstructionError("branching time must lie in [0, T]")
        dims = [(p.state_dim, p.control_dim) for p in others[0]]
        for k in range(K):
            if [(p.state_dim, p.control_dim) for p in others[k]] != dims:
                raise GameConstructionError("player dimensions must agree across hypotheses")
            for s in shared[k]:
                if max(s.players) > len(others[k]):
                    raise GameConstructionError(f"shared constraint {s.name!r} names an unknown player")

    @property
    def K(self) -> int:
        return self.belief.K

    @property
    def n_players(self) -> int:
        return 1 + len(self.others[0])

    def players(self, k: int) -> tuple:
        return (self.ego,) + self.others[k]

    def with_branching_time(self, t_b: int) -> "ContingencyGame":
        return replace(self, branching_time=int(t_b))

    def with_belief(self, probabilities) -> "ContingencyGame":
        return replace(self, belief=Belief(self.belief.hypotheses, probabilities))

    def restrict(self, hypothesis) -> "ContingencyGame":
        """Single-hypothesis game for ``hypothesis`` (label or index)."""
        k = hypothesis if isinstance(hypothesis, (int, np.integer)) else self.belief.index(hypothesis)
        return replace(
            self,
            others=(self.others[k],),
            shared_constraints=(self.shared_constraints[k],),
            belief=Belief((self.belief.hypotheses[k],), [1.0]),
            branching_time=0,
        )

    def with_initial_states(self, states: Sequence, horizon: Optional[int] = None) -> "ContingencyGame":
        """Same game from new initial states ``states[p]``; others are updated
        identically in every hypothesis."""
        ego = replace(self.ego, initial_state=np.asarray(states[0], dtype=float))
        others = tuple(
            tuple(replace(p, initial_state=np.asarray(states[i + 1], dtype=float)) for i, p in enumerate(row))
            for row in self.others
        )
        T = self.horizon if horizon is None else int(horizon)
        return replace(self, ego=ego, others=others, horizon=T, branching_time=min(self.branching_time, T))


@dataclass
class TrajectoryProfile:
    """``states[k][p]`` is ``(T, n_p)``, ``controls[k][p]`` is ``(T, m_p)``."""

    hypotheses: tuple
    states: list
    controls: list

    @property
    def K(self):
        return len(self.hypotheses)

    def stage_vectors(self, k: int) -> list[np.ndarray]:
        """Per player ``(n+m, T)`` arrays, i.e. ``zs[p][i]`` is a time series."""
        return [np.concatenate([x, u], axis=1).T for x, u in zip(self.states[k], self.controls[k])]

    def to_dict(self) -> dict:
        return {
            "hypotheses": list(self.hypotheses),
            "states": [[x.tolist() for x in row] for row in self.states],
            "controls": [[u.tolist() for u in row] for row in self.controls],
        }

    @classmethod
    def from_dict(cls, d) -> "TrajectoryProfile":
        return cls(
            tuple(d["hypotheses"]),
            [[np.asarray(x, dtype=float) for x in row] for row in d["states"]],
            [[np.asarray(u, dtype=float) for u in row] for row in d["controls"]],
        )


@dataclass
class EquilibriumSolution:
    profile: TrajectoryProfile
    multipliers: dict
    rho: np.ndarray
    kkt_residual: float
    solver: SolveResult
    v: np.ndarray = field(repr=False, default=None)
    verification: Optional["VerificationReport"] = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.solver.converged


# ---------------------------------------------------------------------------
# elementary operations


def rollout(player: PlayerModel, controls) -> np.ndarray:
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != player.control_dim:
        raise GameConstructionError(
            f"controls must have shape (T, {player.control_dim}), got {controls.shape}"
        )
    return rollout_states(player.dynamics, player.initial_state, controls)


def trajectory_cost(player: PlayerModel, profile: TrajectoryProfile, k: int) -> float:
    """Sum of ``player``'s stage costs along hypothesis ``k`` of ``profile``."""
    zs = profile.stage_vectors(k)
    T = zs[0].shape[1]
    val = player.stage_cost(zs, np.arange(T))
    return float(np.sum(np.broadcast_to(np.asarray(val, dtype=float), (T,))))


def expected_cost(game: ContingencyGame, profile: TrajectoryProfile) -> float:
    b = game.belief.probabilities
    return float(sum(b[k] * trajectory_cost(game.ego, profile, k) for k in range(game.K)))


def contingency_constraint(ego_controls: Sequence, t_b: int) -> np.ndarray:
    """Stacked ``u_{theta_1,t} - u_{theta_k,t}`` for ``k >= 2`` and ``t < t_b``."""
    u = [np.asarray(c, dtype=float) for c in ego_controls]
    if len(u) <= 1 or t_b == 0:
        return np.zeros(0)
    return np.concatenate([(u[0][:t_b] - u[k][:t_b]).ravel() for k in range(1, len(u))])


# ---------------------------------------------------------------------------
# stage functions


class _StageFunction:
    """A vector function of the joint stage vector of one hypothesis.

    The structural dependencies are found once with tracers; numerical
    evaluation seeds only those inputs.
    """

    def __init__(self, fn, S, T, label):
        self.fn = fn
        self.S = S
        self.label = label
        try:
            outs = _outputs(fn(ad.seed_tracers(S), np.arange(T)))
        except ad.NonsmoothPrimitiveError as exc:
            raise GameConstructionError(f"{label}: {exc}") from exc
        self.q = len(outs)
        deps = set()
        per_out = []
        pairs = set()
        for o in outs:
            if isinstance(o, ad.Tracer):
                deps |= o.deps
                per_out.append(sorted(o.deps))
                pairs |= o.pairs
            else:
                per_out.append([])
        self.deps = np.array(sorted(deps), dtype=int)
        pos = {d: i for i, d in enumerate(self.deps)}
        self.grad_pattern = [np.array([pos[d] for d in o], dtype=int) for o in per_out]
        sym = set()
        for i, j in pairs:
            sym.add((pos[i], pos[j]))
            sym.add((pos[j], pos[i]))
        self.hess_pattern = sorted(sym)
        self.linear = not sym

    def evaluate(self, svals, t, second_order=True):
        """``svals`` is ``(T, S)``. Returns value ``(T, q)``, Jacobian
        ``(T, q, D)`` and Hessian ``(T, q, D, D)`` (``None`` if affine or
        not requested)."""
        T = svals.shape[0]
        D = self.deps.size
        inputs = [svals[:, i] for i in range(self.S)]
        seed = ad.seed_hyperduals if second_order else ad.seed_duals
        for j, x in enumerate(seed([svals[:, i] for i in self.deps])):
            inputs[self.deps[j]] = x
        outs = _outputs(self.fn(inputs, t))
        val = np.zeros((T, self.q))
        jac = np.zeros((T, self.q, D))
        hess = None if (self.linear or not second_order) else np.zeros((T, self.q, D, D))
        for i, o in enumerate(outs):
            if isinstance(o, ad.HyperDual):
                val[:, i] = o.value
                jac[:, i, :] = o.gradient
                if hess is not None and o.hessian is not None:
                    hess[:, i] = o.hessian
            elif isinstance(o, ad.Dual):
                val[:, i] = o.value
                jac[:, i, :] = o.partials
            else:
                val[:, i] = o
        return val, jac, hess

    def value(self, svals, t):
        outs = _outputs(self.fn([svals[:, i] for i in range(self.S)], t))
        return np.stack([np.broadcast_to(np.asarray(o, dtype=float), svals.shape[:1]) for o in outs], axis=1)


def _outputs(y):
    if isinstance(y, ad._Smooth) or np.ndim(y) == 0:
        return [y]
    if isinstance(y, np.ndarray) and y.dtype != object:
        return list(y)
    return list(y)


def _split(s, offsets, dims):
    return [s[o : o + d] for o, d in zip(offsets, dims)]


# ---------------------------------------------------------------------------
# KKT synthesis


@dataclass
class _Block:
    name: str
    start: int
    stop: int


class GameKKT:
    """The synthesized MCP of a contingency game plus its index map."""

    def __init__(self, game: ContingencyGame):
        self.game = game
        K, T, N = game.K, game.horizon, game.n_players
        self.K, self.T, self.N = K, T, N
        self.t_b = game.branching_time if K > 1 else 0
        players0 = game.players(0)
        self.n = [p.state_dim for p in players0]
        self.m = [p.control_dim for p in players0]
        self.offsets = np.concatenate([[0], np.cumsum([a + b for a, b in zip(self.n, self.m)])])[:-1]
        self.S = int(sum(self.n) + sum(self.m))
        self.times = np.arange(T)

        self._layout()
        self._build_functions()
        self.inert = self._inert_rows()
        self.lower[self.inert] = -np.inf
        self._build_pattern()
        self.mcp = MixedComplementarityProblem(
            residual=self.residual,
            lower=self.lower,
            upper=self.upper,
            jacobian=self.jacobian,
            block_labels=tuple((b.name, slice(b.start, b.stop)) for b in self.blocks),
            residual_and_jacobian=self.residual_and_jacobian,
        )
        self._capped = {}

    # -- layout -------------------------------------------------------------

    def _layout(self):
        g, K, T, N = self.game, self.K, self.T, self.N
        off = 0
        blocks = []
        lower = []
        self.x_idx = [[None] * N for _ in range(K)]
        self.u_idx = [[None] * N for _ in range(K)]
        self.mu_idx = [[None] * N for _ in range(K)]
        self.lam_idx = [[None] * N for _ in range(K)]
        self.sh_idx = [[None] * len(g.shared_constraints[k]) for k in range(K)]
        self.q_priv = [[0] * N for _ in range(K)]

        def take(shape, name, lo):
            nonlocal off
            size = int(np.prod(shape))
            idx = off + np.arange(size).reshape(shape)
            blocks.append(_Block(name, off, off + size))
            lower.append(np.full(size, lo))
            off += size
            return idx

        for k in range(K):
            label = g.belief.hypotheses[k]
            players = g.players(k)
            for p in range(N):
                self.x_idx[k][p] = take((T, self.n[p]), f"{label}/player{p}/states", -np.inf)
                self.u_idx[k][p] = take((T, self.m[p]), f"{label}/player{p}/controls", -np.inf)
            for p in range(N):
                self.mu_idx[k][p] = take((T, self.n[p]), f"{label}/player{p}/dynamics", -np.inf)
                q = 0
                for h in players[p].private_constraints:
                    z = np.zeros(self.n[p] + self.m[p])
                    q += len(_outputs(h(list(z))))
                self.q_priv[k][p] = q
                self.lam_idx[k][p] = take((T, q), f"{label}/player{p}/private", 0.0)
                for s, sc in enumerate(g.shared_constraints[k]):
                    if sc.owner == p:
                        q_s = len(_outputs(sc.function(self._zero_split())))
                        self.sh_idx[k][s] = take((T, q_s), f"{label}/shared/{sc.name or s}", 0.0)
        self.rho_idx = take((K - 1, self.t_b, self.m[0]), "contingency", -np.inf)
        self.dimension = off
        self.lower = np.concatenate(lower) if lower else np.zeros(0)
        self.upper = np.full(off, np.inf)
        self.blocks = blocks

    def _zero_split(self):
        return _split([0.0] * self.S, self.offsets, [a + b for a, b in zip(self.n, self.m)])

    def capped_mcp(self, cap: float) -> MixedComplementarityProblem:
        """Same residual with inequality multipliers boxed in ``[0, cap]``."""
        if cap not in self._capped:
            upper = self.upper.copy()
            upper[np.isfinite(self.lower) & ~np.isfinite(self.upper)] = cap
            self._capped[cap] = replace(self.mcp, upper=upper)
        return self._capped[cap]

    def stage_index(self, k):
        """``(T, S)`` global indices of the joint stage vector."""
        cols = []
        for p in range(self.N):
            cols.append(self.x_idx[k][p])
            cols.append(self.u_idx[k][p])
        return np.concatenate(cols, axis=1)

    # -- functions -----------------------------------------------------------

    def _build_functions(self):
        g, K, N, S, T = self.game, self.K, self.N, self.S, self.T
        offs, dims = self.offsets, [a + b for a, b in zip(self.n, self.m)]
        self.own = [np.arange(offs[p], offs[p] + dims[p]) for p in range(N)]
        self.cost_fn = [[None] * N for _ in range(K)]
        self.priv_fn = [[None] * N for _ in range(K)]
        self.dyn_fn = [[None] * N for _ in range(K)]
        self.sh_fn = [[None] * len(g.shared_constraints[k]) for k in range(K)]
        for k in range(K):
            players = g.players(k)
            for p, pl in enumerate(players):
                o, d, n = offs[p], dims[p], self.n[p]

                def cost(s, t, pl=pl):
                    return pl.stage_cost(_split(s, offs, dims), t)

                def priv(s, t, pl=pl, o=o, d=d):
                    out = []
                    for h in pl.private_constraints:
                        out += _outputs(h(s[o : o + d]))
                    return out

                def dyn(s, t, pl=pl, o=o, n=n, d=d):
                    return pl.dynamics(s[o : o + n], s[o + n : o + d])

                tag = f"{g.belief.hypotheses[k]}/player{p}"
                self.cost_fn[k][p] = _StageFunction(cost, S, T, f"{tag} cost")
                self.priv_fn[k][p] = _StageFunction(priv, S, T, f"{tag} constraints") if self.q_priv[k][p] else None
                self.dyn_fn[k][p] = _StageFunction(dyn, S, T, f"{tag} dynamics")
            for s_i, sc in enumerate(g.shared_constraints[k]):

                def shared(s, t, sc=sc):
                    return sc.function(_split(s, offs, dims))

                self.sh_fn[k][s_i] = _StageFunction(shared, S, T, f"{g.belief.hypotheses[k]}/shared {sc.name}")

    def _inert_rows(self):
        """Multipliers of first-stage inequality rows that involve no control.

        Such a row is a constant fixed by the initial state, so its
        multiplier is pinned to zero (the row of ``G`` becomes ``lambda``).
        """
        controls = set()
        for p in range(self.N):
            controls.update(range(self.offsets[p] + self.n[p], self.offsets[p] + self.n[p] + self.m[p]))
        out = []
        for k in range(self.K):
            pairs = [(self.priv_fn[k][p], self.lam_idx[k][p]) for p in range(self.N)]
            pairs += [(self.sh_fn[k][s], self.sh_idx[k][s]) for s in range(len(self.sh_fn[k]))]
            for fn, idx in pairs:
                if fn is None:
                    continue
                for j, gp in enumerate(fn.grad_pattern):
                    if not controls.intersection(int(fn.deps[a]) for a in gp):
                        out.append(int(idx[0, j]))
        return np.array(sorted(out), dtype=int)

    def _weight(self, k, p):
        return float(self.game.belief.probabilities[k]) if p == 0 else 1.0

    # -- sparsity pattern ------------------------------------------------------

    def _build_pattern(self):
        """Fix the Jacobian pattern and the recipe producing its values."""
        K, T, N = self.K, self.T, self.N
        rows, cols, self._extract = [], [], []

        def add(r, c, recipe):
            r = np.asarray(r).ravel()
            c = np.asarray(c).ravel()
            rows.append(r)
            cols.append(c)
            self._extract.append(recipe)

        self._hess_pos = [[None] * N for _ in range(K)]
        for k in range(K):
            sidx = self.stage_index(k)
            zrow = [np.concatenate([self.x_idx[k][p], self.u_idx[k][p]], axis=1) for p in range(N)]
            for p in range(N):
                own = self.own[p]
                own_pos = {int(s): i for i, s in enumerate(own)}
                # stationarity Hessian, rows own / cols stage
                pairs = set()
                fns = [self.cost_fn[k][p], self.priv_fn[k][p], self.dyn_fn[k][p]]
                fns += [self.sh_fn[k][s] for s, sc in enumerate(self.game.shared_constraints[k]) if p in sc.players]
                for fn in fns:
                    if fn is None:
                        continue
                    for a, b in fn.hess_pattern:
                        ga, gb = int(fn.deps[a]), int(fn.deps[b])
                        if ga in own_pos:
                            pairs.add((own_pos[ga], gb))
                pr = np.array(sorted(pairs), dtype=int).reshape(-1, 2)
                self._hess_pos[k][p] = pr
                add(zrow[p][:, pr[:, 0]], sidx[:, pr[:, 1]], ("hess", k, p))

                # stationarity x private multipliers
                fn = self.priv_fn[k][p]
                if fn is not None:
                    r_l, c_l, j_l = [], [], []
                    for j, gp in enumerate(fn.grad_pattern):
                        for a in gp:
                            ga = int(fn.deps[a])
                            if ga in own_pos:
                                r_l.append(own_pos[ga])
                                c_l.append(j)
                                j_l.append(a)
                    sel = (np.array(r_l, dtype=int), np.array(c_l, dtype=int), np.array(j_l, dtype=int))
                    add(zrow[p][:, sel[0]], self.lam_idx[k][p][:, sel[1]], ("stat_priv", k, p, sel))

                # stationarity x shared multipliers
                for s, sc in enumerate(self.game.shared_constraints[k]):
                    if p not in sc.players:
                        continue
                    fn = self.sh_fn[k][s]
                    r_l, c_l, j_l = [], [], []
                    for j, gp in enumerate(fn.grad_pattern):
                        for a in gp:
                            ga = int(fn.deps[a])
                            if ga in own_pos:
                                r_l.append(own_pos[ga])
                                c_l.append(j)
                                j_l.append(a)
                    sel = (np.array(r_l, dtype=int), np.array(c_l, dtype=int), np.array(j_l, dtype=int))
                    add(zrow[p][:, sel[0]], self.sh_idx[k][s][:, sel[1]], ("stat_sh", k, p, s, sel))

                # stationarity x dynamics multipliers
                n = self.n[p]
                add(self.x_idx[k][p], self.mu_idx[k][p], ("const", np.ones(T * n)))
                fn = self.dyn_fn[k][p]
                r_l, c_l, j_l = [], [], []
                for i, gp in enumerate(fn.grad_pattern):
                    for a in gp:
                        r_l.append(own_pos[int(fn.deps[a])])
                        c_l.append(i)
                        j_l.append(a)
                dsel = (np.array(r_l, dtype=int), np.array(c_l, dtype=int), np.array(j_l, dtype=int))
                add(zrow[p][: T - 1][:, dsel[0]], self.mu_idx[k][p][1:][:, dsel[1]], ("stat_dyn", k, p, dsel))

                # dynamics rows
                add(self.mu_idx[k][p], self.x_idx[k][p], ("const", np.ones(T * n)))
                add(self.mu_idx[k][p][1:][:, dsel[1]], zrow[p][: T - 1][:, dsel[0]], ("dyn_rows", k, p, dsel))

                # private constraint rows
                fn = self.priv_fn[k][p]
                if fn is not None:
                    r_l, j_l = [], []
                    for j, gp in enumerate(fn.grad_pattern):
                        for a in gp:
                            r_l.append(j)
                            j_l.append(a)
                    psel = (np.array(r_l, dtype=int), np.array(j_l, dtype=int))
                    add(self.lam_idx[k][p][:, psel[0]], sidx[:, fn.deps[psel[1]]], ("priv_rows", k, p, psel))

            for s, sc in enumerate(self.game.shared_constraints[k]):
                fn = self.sh_fn[k][s]
                r_l, j_l = [], []
                for j, gp in enumerate(fn.grad_pattern):
                    for a in gp:
                        r_l.append(j)
                        j_l.append(a)
                ssel = (np.array(r_l, dtype=int), np.array(j_l, dtype=int))
                add(self.sh_idx[k][s][:, ssel[0]], sidx[:, fn.deps[ssel[1]]], ("sh_rows", k, s, ssel))

        # contingency coupling
        if self.rho_idx.size:
            u0 = self.u_idx[0][0][: self.t_b]
            for kk in range(1, K):
                uk = self.u_idx[kk][0][: self.t_b]
                rho = self.rho_idx[kk - 1]
                size = rho.size
                add(rho, u0, ("const", np.ones(size)))
                add(rho, uk, ("const", -np.ones(size)))
                add(u0, rho, ("const", np.ones(size)))
                add(uk, rho, ("const", -np.ones(size)))

        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        self._inert_data = np.isin(rows, self.inert)
        if self.inert.size:
            rows = np.concatenate([rows, self.inert])
            cols = np.concatenate([cols, self.inert])
        d = self.dimension
        key = rows.astype(np.int64) * d + cols
        if np.unique(key).size != key.size:
            raise GameConstructionError("internal error: duplicate Jacobian entries")
        order = np.lexsort((rows, cols))
        self._order = order
        self._indices = rows[order]
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(cols, minlength=d))])
        self.pattern_rows, self.pattern_cols = rows, cols

    @property
    def nnz(self) -> int:
        return int(self.pattern_rows.size)

    # -- evaluation -----------------------------------------------------------

    def _evaluate(self, v, want_jacobian=True):
        g, K, T, N = self.game, self.K, self.T, self.N
        tt = self.times
        G = np.zeros(self.dimension)
        cache = {}
        for k in range(K):
            sidx = self.stage_index(k)
            svals = v[sidx]
            players = g.players(k)
            sh_eval = []
            for s, sc in enumerate(g.shared_constraints[k]):
                fn = self.sh_fn[k][s]
                val, jac, hess = fn.evaluate(svals, tt, want_jacobian)
                lam = v[self.sh_idx[k][s]]
                G[self.sh_idx[k][s]] = val
                sh_eval.append((val, jac, hess, lam))
            for p in range(N):
                own = self.own[p]
                w = self._weight(k, p)
                grad = np.zeros((T, self.S))
                H = np.zeros((T, own.size, self.S)) if want_jacobian else None

                def acc(fn, coef, jac, hess):
                    # coef: (T, q) scaling of each output's derivative
                    grad[:, fn.deps] += np.einsum("tq,tqd->td", coef, jac)
                    if want_jacobian and hess is not None:
                        full = np.einsum("tq,tqab->tab", coef, hess)
                        sel = np.isin(fn.deps, own)
                        if sel.any():
                            rows_local = np.searchsorted(own, fn.deps[sel])
                            H[:, rows_local[:, None], fn.deps[None, :]] += full[:, sel, :]

                fn = self.cost_fn[k][p]
                val, jac, hess = fn.evaluate(svals, tt, want_jacobian)
                acc(fn, np.full((T, 1), w), jac, hess)

                fn = self.priv_fn[k][p]
                if fn is not None:
                    val, jac, hess = fn.evaluate(svals, tt, want_jacobian)
                    lam = v[self.lam_idx[k][p]]
                    G[self.lam_idx[k][p]] = val
                    acc(fn, -w * lam, jac, hess)
                    cache[("priv", k, p)] = jac

                for s, sc in enumerate(g.shared_constraints[k]):
                    if p not in sc.players:
                        continue
                    val, jac, hess, lam = sh_eval[s]
                    r = w * sc.relative_weight(p)
                    acc(self.sh_fn[k][s], -r * lam, jac, hess)
                    cache[("sh", k, s)] = jac
                    cache[("shw", k, p, s)] = r

                # dynamics
                fn = self.dyn_fn[k][p]
                val, jac, hess = fn.evaluate(svals[: T - 1], tt[: T - 1], want_jacobian)
                n = self.n[p]
                x = v[self.x_idx[k][p]]
                mu = v[self.mu_idx[k][p]]
                res = np.empty((T, n))
                res[0] = x[0] - players[p].initial_state
                res[1:] = x[1:] - val
                G[self.mu_idx[k][p]] = res
                # -mu_{t+1}' f(x_t, u_t)
                coef = -mu[1:]
                grad[: T - 1, fn.deps] += np.einsum("tq,tqd->td", coef, jac)
                if want_jacobian and hess is not None:
                    full = np.einsum("tq,tqab->tab", coef, hess)
                    rows_local = np.searchsorted(own, fn.deps)
                    H[: T - 1, rows_local[:, None], fn.deps[None, :]] += full
                cache[("dyn", k, p)] = jac

                stat = grad[:, own]
                stat[:, : n] += mu
                G[np.concatenate([self.x_idx[k][p], self.u_idx[k][p]], axis=1)] = stat
                if want_jacobian:
                    cache[("hess", k, p)] = H

        if self.rho_idx.size:
            rho = v[self.rho_idx]
            u0 = self.u_idx[0][0][: self.t_b]
            for kk in range(1, K):
                uk = self.u_idx[kk][0][: self.t_b]
                G[self.rho_idx[kk - 1]] = v[u0] - v[uk]
                G[u0] += rho[kk - 1]
                G[uk] -= rho[kk - 1]

        G[self.inert] = v[self.inert]
        if not want_jacobian:
            return G, None
        return G, self._jacobian_from(cache)

    def _jacobian_from(self, cache):
        parts = []
        for recipe in self._extract:
            kind = recipe[0]
            if kind == "const":
                parts.append(recipe[1])
            elif kind == "hess":
                _, k, p = recipe
                pr = self._hess_pos[k][p]
                parts.append(cache[("hess", k, p)][:, pr[:, 0], pr[:, 1]].ravel())
            elif kind == "stat_priv":
                _, k, p, (r, c, j) = recipe
                w = self._weight(k, p)
                parts.append((-w * cache[("priv", k, p)][:, c, j]).ravel())
            elif kind == "stat_sh":
                _, k, p, s, (r, c, j) = recipe
                rw = cache[("shw", k, p, s)]
                parts.append((-rw * cache[("sh", k, s)][:, c, j]).ravel())
            elif kind == "stat_dyn":
                _, k, p, (r, c, j) = recipe
                parts.append((-cache[("dyn", k, p)][:, c, j]).ravel())
            elif kind == "dyn_rows":
                _, k, p, (r, c, j) = recipe
                parts.append((-cache[("dyn", k, p)][:, c, j]).ravel())
            elif kind == "priv_rows":
                _, k, p, (r, j) = recipe
                parts.append(cache[("priv", k, p)][:, r, j].ravel())
            elif kind == "sh_rows":
                _, k, s, (r, j) = recipe
                parts.append(cache[("sh", k, s)][:, r, j].ravel())
            else:  # pragma: no cover
                raise AssertionError(kind)
        data = np.concatenate(parts) if parts else np.zeros(0)
        data[self._inert_data] = 0.0
        data = np.concatenate([data, np.ones(self.inert.size)])[self._order]
        d = self.dimension
        return sp.csc_matrix((data, self._indices, self._indptr), shape=(d, d))

    def residual(self, v):
        return self._evaluate(np.asarray(v, dtype=float), want_jacobian=False)[0]

    def jacobian(self, v):
        return self._evaluate(np.asarray(v, dtype=float))[1]

    def residual_and_jacobian(self, v):
        return self._evaluate(np.asarray(v, dtype=float))

    # -- packing ----------------------------------------------------------------

    def initial_guess(self, init: Optional[TrajectoryProfile] = None, multiplier: float = 1e-2) -> np.ndarray:
        """Zero-control rollouts (or ``init``) for the primal blocks and a
        constant for every multiplier."""
        v = np.full(self.dimension, multiplier)
        for k in range(self.K):
            for p, pl in enumerate(self.game.players(k)):
                if init is None:
                    u = np.zeros((self.T, self.m[p]))
                    x = rollout(pl, u)
                else:
                    x, u = init.states[k][p], init.controls[k][p]
                v[self.x_idx[k][p]] = x
                v[self.u_idx[k][p]] = u
        return v

    def unpack(self, v) -> tuple[TrajectoryProfile, dict, np.ndarray]:
        v = np.asarray(v, dtype=float)
        hyps = self.game.belief.hypotheses
        states = [[v[self.x_idx[k][p]].copy() for p in range(self.N)] for k in range(self.K)]
        controls = [[v[self.u_idx[k][p]].copy() for p in range(self.N)] for k in range(self.K)]
        mult = {}
        for k in range(self.K):
            for p in range(self.N):
                mult[(hyps[k], p, "dynamics")] = v[self.mu_idx[k][p]].copy()
                mult[(hyps[k], p, "private")] = v[self.lam_idx[k][p]].copy()
            for s, sc in enumerate(self.game.shared_constraints[k]):
                mult[(hyps[k], "shared", sc.name or str(s))] = v[self.sh_idx[k][s]].copy()
        return TrajectoryProfile(hyps, states, controls), mult, v[self.rho_idx].copy()

    def shared_multipliers(self, v, k: int, s: int) -> dict:
        """Multiplier each participant attaches to shared constraint ``s``.

        The ego value is per unit probability (see module docstring)."""
        sc = self.game.shared_constraints[k][s]
        lam = np.asarray(v)[self.sh_idx[k][s]]
        return {p: sc.relative_weight(p) * lam for p in sc.players}

    # -- independent Lagrangian (for checks) -------------------------------------

    def lagrangian(self, v, k: int, p: int):
        """Lagrangian of player ``p`` in hypothesis ``k`` evaluated with plain
        floats; for the ego all hypothesis branches and the contingency term
        are included.

        ``v`` may also be a ``(B, dimension)`` batch, giving ``B`` values.
        """
        v = np.asarray(v, dtype=float)
        V = np.atleast_2d(v)
        if p == 0:
            total = sum(self._branch_lagrangian(V, kk, 0) for kk in range(self.K))
            if self.rho_idx.size:
                u0 = V[:, self.u_idx[0][0][: self.t_b]]
                for kk in range(1, self.K):
                    diff = u0 - V[:, self.u_idx[kk][0][: self.t_b]]
                    total = total + np.sum(V[:, self.rho_idx[kk - 1]] * diff, axis=(1, 2))
        else:
            total = self._branch_lagrangian(V, k, p)
        return float(total[0]) if v.ndim == 1 else total

    def _branch_lagrangian(self, V, k, p):
        g = self.game
        T, B = self.T, V.shape[0]
        pl = g.players(k)[p]
        w = self._weight(k, p)
        svals = V[:, self.stage_index(k)]  # (B, T, S)
        cols = [svals[..., i] for i in range(self.S)]

        def values(fn):
            outs = _outputs(fn(cols, self.times))
            return np.stack([np.broadcast_to(np.asarray(o, dtype=float), (B, T)) for o in outs], axis=-1)

        offs = self.offsets
        dims = [a + b for a, b in zip(self.n, self.m)]
        zs = [cols[o : o + d] for o, d in zip(offs, dims)]
        total = w * np.sum(np.broadcast_to(pl.stage_cost(zs, self.times), (B, T)), axis=1)
        if self.q_priv[k][p]:
            h = values(self.priv_fn[k][p].fn)
            total -= w * np.sum(V[:, self.lam_idx[k][p]] * h, axis=(1, 2))
        for s, sc in enumerate(g.shared_constraints[k]):
            if p in sc.players:
                gv = values(self.sh_fn[k][s].fn)
                total -= w * sc.relative_weight(p) * np.sum(V[:, self.sh_idx[k][s]] * gv, axis=(1, 2))
        x = V[:, self.x_idx[k][p]]
        u = V[:, self.u_idx[k][p]]
        mu = V[:, self.mu_idx[k][p]]
        total += np.sum(mu[:, 0] * (x[:, 0] - pl.initial_state), axis=1)
        if T > 1:
            xs = [x[:, :-1, i] for i in range(self.n[p])]
            us = [u[:, :-1, i] for i in range(self.m[p])]
            f = np.stack([np.asarray(c, dtype=float) for c in pl.dynamics(xs, us)], axis=-1)
            total += np.sum(mu[:, 1:] * (x[:, 1:] - f), axis=(1, 2))
        return total

    def own_primal_index(self, k, p):
        return np.concatenate([self.x_idx[k][p], self.u_idx[k][p]], axis=1)


def build_kkt_mcp(game: ContingencyGame) -> GameKKT:
    """Synthesize the KKT conditions of ``game`` as an MCP."""
    return GameKKT(game)


# ---------------------------------------------------------------------------
# solve / verify


def solve_contingency_game(
    game: ContingencyGame,
    init: Optional[TrajectoryProfile] = None,
    opts: SolverOptions = SolverOptions(),
    kkt: Optional[GameKKT] = None,
    v0: Optional[np.ndarray] = None,
    multiplier_cap: float = np.inf,
    fallbacks: Sequence[SolverOptions] = (),
) -> EquilibriumSolution:
    """Solve the KKT MCP of ``game``.

    ``opts`` and then each of ``fallbacks`` is tried from the same start until
    one converges. With a finite ``multiplier_cap`` every attempt first solves
    the elastic problem whose inequality multipliers live in
    ``[0, multiplier_cap]`` (an exact penalty that keeps the iterates bounded)
    and then polishes on the original problem. The reported residual is
    always that of the original problem.
    """
    kkt = kkt if kkt is not None else build_kkt_mcp(game)
    if v0 is None:
        v0 = kkt.initial_guess(init)
    start = time.perf_counter()
    best, iterations, history = None, 0, []
    for attempt in (opts, *fallbacks):
        result = _solve_attempt(kkt, v0, attempt, multiplier_cap)
        iterations += result.iterations
        history.extend(result.merit_history)
        score = max(result.merit_norm, result.natural_residual)
        if best is None or result.converged or score < best[0]:
            best = (score, result)
        if result.converged:
            break
    result = replace(
        best[1], iterations=iterations, wall_time=time.perf_counter() - start, merit_history=history
    )
    profile, mult, rho = kkt.unpack(result.solution)
    return EquilibriumSolution(
        profile=profile,
        multipliers=mult,
        rho=rho,
        kkt_residual=best[0],
        solver=result,
        v=result.solution,
    )


def _solve_attempt(kkt: GameKKT, v0: np.ndarray, opts: SolverOptions, cap: float) -> SolveResult:
    if not np.isfinite(cap):
        return solve_mcp(kkt.mcp, v0, opts)
    elastic = solve_mcp(kkt.capped_mcp(cap), v0, opts)
    polish = solve_mcp(kkt.mcp, elastic.solution, replace(opts, smoothing=0.0, max_iterations=20, restart_attempts=0))
    return replace(
        polish,
        iterations=elastic.iterations + polish.iterations,
        merit_history=elastic.merit_history + polish.merit_history,
    )


@dataclass
class VerificationReport:
    stationarity: dict  # (hypothesis, player) -> inf-norm
    primal_feasibility: float
    complementarity: float
    contingency: float
    tol: float

    @property
    def max_stationarity(self) -> float:
        return max(self.stationarity.values()) if self.stationarity else 0.0

    @property
    def passed(self) -> bool:
        return max(self.max_stationarity, self.primal_feasibility, self.complementarity) <= self.tol

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "stationarity": {f"{h}/player{p}": val for (h, p), val in self.stationarity.items()},
            "primal_feasibility": self.primal_feasibility,
            "complementarity": self.complementarity,
            "contingency": self.contingency,
        }


def verify_equilibrium(
    game: ContingencyGame,
    solution,
    tol: float = 1e-6,
    kkt: Optional[GameKKT] = None,
) -> VerificationReport:
    """First-order (KKT) check of a candidate equilibrium.

    ``solution`` is an :class:`EquilibriumSolution` or a raw MCP vector.
    """
    kkt = kkt if kkt is not None else build_kkt_mcp(game)
    v = solution.v if isinstance(solution, EquilibriumSolution) else np.asarray(solution, dtype=float)
    G = kkt.residual(v)
    stat = {}
    feas = 0.0
    comp = 0.0
    for k in range(kkt.K):
        hyp = game.belief.hypotheses[k]
        for p in range(kkt.N):
            rows = kkt.own_primal_index(k, p)
            stat[(hyp, p)] = float(np.max(np.abs(G[rows]))) if rows.size else 0.0
            feas = max(feas, float(np.max(np.abs(G[kkt.mu_idx[k][p]]), initial=0.0)))
            ineq = [(kkt.lam_idx[k][p])]
            for idx in ineq:
                h, lam = G[idx], v[idx]
                feas = max(feas, float(np.max(-h, initial=0.0)))
                comp = max(comp, float(np.max(np.abs(np.minimum(lam, h)), initial=0.0)))
                comp = max(comp, float(np.max(-lam, initial=0.0)))
        for s in range(len(game.shared_constraints[k])):
            idx = kkt.sh_idx[k][s]
            h, lam = G[idx], v[idx]
            feas = max(feas, float(np.max(-h, initial=0.0)))
            comp = max(comp, float(np.max(np.abs(np.minimum(lam, h)), initial=0.0)))
            comp = max(comp, float(np.max(-lam, initial=0.0)))
    cont = float(np.max(np.abs(G[kkt.rho_idx]), initial=0.0)) if kkt.rho_idx.size else 0.0
    feas = max(feas, cont)
    return VerificationReport(stat, feas, comp, cont, tol)
