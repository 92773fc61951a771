"""The two benchmark games: a car passing a jaywalking pedestrian and a
three-car highway overtaking maneuver.

Road frame: cars drive along the first coordinate ``p1``; lanes are values of
the second coordinate ``p2`` and "left" means larger ``p2``.

Collision avoidance between agents ``i`` and ``j`` is the smooth union of
three half-planes in the relative position ``d = p_i - p_j``::

    LSE_alpha(d.n_top - 1, d.n_side - 1, d.n_bottom - 1) >= 0

``n_top``/``n_bottom`` keep ``i`` ahead of or behind ``j``; ``n_side`` lets
``i`` pass on one side only. The missing fourth half-plane is the blocked
side: the pedestrian's goal side, or a car's target-lane side.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from contingency_games import autodiff as ad
from contingency_games.config import ConfigError, apply_override, from_dict, parse_override, to_dict
from contingency_games.dynamics import (
    PointMassParams,
    UnicycleParams,
    point_mass_bounds,
    point_mass_step,
    unicycle_bounds,
    unicycle_step,
)
from contingency_games.game import Belief, ContingencyGame, PlayerModel, SharedConstraint
from contingency_games.mcp import SolverOptions

SCHEMA_VERSION = 1
SCENARIOS = ("jaywalking", "overtaking")


# ---------------------------------------------------------------------------
# smooth max and collision geometry


def lse_smooth_max(values, alpha: float):
    """``(1/alpha) log sum_i exp(alpha c_i)`` with a max shift.

    Accepts floats, arrays (elementwise over a batch) or AD numbers. The shift
    is treated as a constant, which leaves the value and all derivatives
    unchanged.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    values = list(values)
    if not values:
        raise ValueError("lse_smooth_max needs at least one value")
    if len(values) == 1:
        return values[0]
    if any(isinstance(c, ad.Tracer) for c in values):
        shift = 0.0
    else:
        shift = np.max(np.stack([np.broadcast_to(ad.value_of(c), np.shape(ad.value_of(values[0]))) for c in values]), axis=0)
    total = 0.0
    for c in values:
        total = total + ad.exp(alpha * (c - shift))
    return shift + ad.log(total) / alpha


def collision_constraint(d, n_top, n_side, n_bottom, alpha: float):
    """Smooth collision margin for relative position ``d`` (``>= 0`` is safe)."""
    terms = [d[0] * n[0] + d[1] * n[1] - 1.0 for n in (n_top, n_side, n_bottom)]
    return lse_smooth_max(terms, alpha)


def default_geometry(length: float, width: float, open_left: bool) -> "Geometry":
    """Half-plane normals for a box of half-length ``length`` and half-width
    ``width``; ``open_left`` blocks passing on the ``+p2`` side."""
    side = -1.0 / width if open_left else 1.0 / width
    return Geometry([1.0 / length, 0.0], [0.0, side], [-1.0 / length, 0.0])


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CarWeights:
    lane: float = 1.0
    progress: float = 1.0
    velocity: float = 0.1
    heading: float = 0.5
    acceleration: float = 0.1
    steering: float = 0.5


@dataclass
class PedestrianWeights:
    goal: float = 1.0
    velocity: float = 0.1
    acceleration: float = 0.1


@dataclass
class CarLimits:
    v_min: float = 0.0
    v_max: float = 12.0
    a_min: float = -4.0
    a_max: float = 3.0
    omega_min: float = -1.0
    omega_max: float = 1.0


@dataclass
class PedestrianLimits:
    v_min: float = -1.0
    v_max: float = 1.0
    a_min: float = -0.5
    a_max: float = 0.5


@dataclass
class AgentConfig:
    """``model`` is ``unicycle`` (car) or ``point_mass`` (pedestrian). Cars use
    ``target_lane``/``target_speed``; pedestrians use ``goal``. A hypothesis
    may override these per intent."""

    name: str
    model: str
    initial_state: list[float]
    target_lane: float = 0.0
    target_speed: float = 0.0
    goal: list[float] = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class Geometry:
    n_top: list[float]
    n_side: list[float]
    n_bottom: list[float]


@dataclass
class PairConfig:
    """Collision pair; ``ratio`` holds the multiplier weights of both agents."""

    agents: list[str]
    ratio: list[float]

    @property
    def key(self) -> str:
        return f"{self.agents[0]}-{self.agents[1]}"


@dataclass
class HypothesisConfig:
    label: str
    agent: str
    goal: Optional[list[float]] = None
    target_lane: Optional[float] = None
    geometry: dict[str, Geometry] = field(default_factory=dict)


@dataclass
class GridConfig:
    """Uniform grid of initial positions for ``agent``."""

    agent: str
    x_range: list[float]
    nx: int
    y_range: list[float]
    ny: int

    def points(self) -> np.ndarray:
        xs = np.linspace(self.x_range[0], self.x_range[1], self.nx)
        ys = np.linspace(self.y_range[0], self.y_range[1], self.ny)
        return np.array([(x, y) for y in ys for x in xs])


@dataclass
class SolverSettings:
    """Newton settings plus the attempt chain.

    Attempts run with ``smoothing`` first and then with each entry of
    ``fallback_smoothing``; all of them use the elastic multiplier box
    ``[0, multiplier_cap]`` before polishing on the exact problem.
    """

    residual_tolerance: float = 1e-8
    max_iterations: int = 60
    line_search_contraction: float = 0.5
    armijo_slope: float = 1e-4
    regularization_floor: float = 1e-10
    restart_attempts: int = 2
    smoothing: float = 0.0
    smoothing_decrease: float = 0.2
    fallback_smoothing: list[float] = field(default_factory=lambda: [3.0])
    multiplier_cap: float = 1e3

    def options(self, seed: int = 0) -> SolverOptions:
        d = to_dict(self)
        del d["fallback_smoothing"], d["multiplier_cap"]
        return SolverOptions(**d, seed=seed)

    def attempts(self, seed: int = 0) -> list[SolverOptions]:
        first = self.options(seed)
        return [first] + [replace(first, smoothing=float(s)) for s in self.fallback_smoothing]

    def solve_kwargs(self, seed: int = 0) -> dict:
        first, *rest = self.attempts(seed)
        return {"opts": first, "fallbacks": tuple(rest), "multiplier_cap": self.multiplier_cap}


@dataclass
class ScenarioConfig:
    scenario: str
    ego: AgentConfig
    others: list[AgentConfig]
    hypotheses: list[HypothesisConfig]
    pairs: list[PairConfig]
    grid: GridConfig
    schema_version: int = SCHEMA_VERSION
    dt: float = 0.2
    horizon: int = 25
    branching_time: int = 10
    belief: list[float] = field(default_factory=lambda: [0.5, 0.5])
    lse_sharpness: float = 20.0
    car_weights: CarWeights = field(default_factory=CarWeights)
    pedestrian_weights: PedestrianWeights = field(default_factory=PedestrianWeights)
    car_limits: CarLimits = field(default_factory=CarLimits)
    pedestrian_limits: PedestrianLimits = field(default_factory=PedestrianLimits)
    branching_times: list[int] = field(default_factory=lambda: [0, 5, 10, 15, 20, 25])
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict) or "schema_version" not in data:
            raise ConfigError("config must contain schema_version")
        return from_dict(cls, data)

    def agent_names(self) -> list[str]:
        return [self.ego.name] + [a.name for a in self.others]

    def with_overrides(self, overrides) -> "ScenarioConfig":
        data = self.to_dict()
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            apply_override(data, key, value)
        return ScenarioConfig.from_dict(data)

    def with_initial_position(self, agent: str, position) -> "ScenarioConfig":
        cfg = copy.deepcopy(self)
        for a in [cfg.ego] + cfg.others:
            if a.name == agent:
                a.initial_state = [float(position[0]), float(position[1])] + list(a.initial_state[2:])
                return cfg
        raise ConfigError(f"unknown agent {agent!r}")


def validate(cfg: ScenarioConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version} (expected {SCHEMA_VERSION})")
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}")
    if not cfg.dt > 0:
        raise ConfigError("dt must be positive")
    if cfg.horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if not 0 <= cfg.branching_time <= cfg.horizon:
        raise ConfigError("branching_time must lie in [0, horizon]")
    if any(not 0 <= t <= cfg.horizon for t in cfg.branching_times):
        raise ConfigError("branching_times must lie in [0, horizon]")
    if not cfg.lse_sharpness > 0:
        raise ConfigError("lse_sharpness must be positive")
    for group in (cfg.car_weights, cfg.pedestrian_weights):
        for k, v in to_dict(group).items():
            if v < 0:
                raise ConfigError(f"weight {k} must be nonnegative")
    try:
        UnicycleParams(cfg.dt, **to_dict(cfg.car_limits))
        PointMassParams(cfg.dt, **to_dict(cfg.pedestrian_limits))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    b = np.asarray(cfg.belief, dtype=float)
    if len(b) != len(cfg.hypotheses):
        raise ConfigError("belief needs one probability per hypothesis")
    if np.any(b < 0) or abs(b.sum() - 1.0) > 1e-12:
        raise ConfigError("belief must be nonnegative and sum to 1")
    names = [cfg.ego.name] + [a.name for a in cfg.others]
    if len(set(names)) != len(names):
        raise ConfigError("agent names must be unique")
    for a in [cfg.ego] + cfg.others:
        if a.model not in ("unicycle", "point_mass"):
            raise ConfigError(f"{a.name}: model must be unicycle or point_mass")
        if len(a.initial_state) != 4:
            raise ConfigError(f"{a.name}: initial_state needs 4 entries")
        if len(a.goal) != 2:
            raise ConfigError(f"{a.name}: goal needs 2 entries")
    if cfg.ego.model != "unicycle":
        raise ConfigError("the ego agent must be a car")
    labels = [h.label for h in cfg.hypotheses]
    if not labels or len(set(labels)) != len(labels):
        raise ConfigError("hypothesis labels must be unique and nonempty")
    for p in cfg.pairs:
        if len(p.agents) != 2 or len(p.ratio) != 2 or p.agents[0] == p.agents[1]:
            raise ConfigError("each pair needs two distinct agents and two ratios")
        if any(a not in names for a in p.agents):
            raise ConfigError(f"pair {p.key}: unknown agent")
        if names.index(p.agents[0]) > names.index(p.agents[1]):
            raise ConfigError(f"pair {p.key}: list agents in player order")
        if any(not r > 0 for r in p.ratio):
            raise ConfigError(f"pair {p.key}: ratios must be positive")
    for h in cfg.hypotheses:
        if h.agent not in names[1:]:
            raise ConfigError(f"hypothesis {h.label}: unknown agent {h.agent!r}")
        if h.goal is not None and len(h.goal) != 2:
            raise ConfigError(f"hypothesis {h.label}: goal needs 2 entries")
        for p in cfg.pairs:
            if p.key not in h.geometry:
                raise ConfigError(f"hypothesis {h.label}: missing geometry for pair {p.key}")
        extra = set(h.geometry) - {p.key for p in cfg.pairs}
        if extra:
            raise ConfigError(f"hypothesis {h.label}: geometry for unknown pair(s) {sorted(extra)}")
    if cfg.grid.agent not in names[1:]:
        raise ConfigError("grid agent must be a non-ego agent")
    if cfg.grid.nx < 1 or cfg.grid.ny < 1:
        raise ConfigError("grid must be nonempty")
    if not cfg.solver.multiplier_cap > 0:
        raise ConfigError("solver.multiplier_cap must be positive")
    try:
        cfg.solver.attempts()
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc


# ---------------------------------------------------------------------------
# defaults

JAYWALK_LENGTH, JAYWALK_WIDTH = 2.5, 1.2
OVERTAKE_LENGTH, OVERTAKE_WIDTH = 5.0, 2.0


def default_config(scenario: str) -> ScenarioConfig:
    if scenario == "jaywalking":
        geo = lambda open_left: {"ego-pedestrian": default_geometry(JAYWALK_LENGTH, JAYWALK_WIDTH, open_left)}
        return ScenarioConfig(
            scenario="jaywalking",
            ego=AgentConfig("ego", "unicycle", [0.0, 0.0, 5.0, 0.0], target_lane=0.0, target_speed=6.0),
            others=[AgentConfig("pedestrian", "point_mass", [17.0, 0.0, 0.0, 0.0], goal=[17.0, 4.0])],
            hypotheses=[
                HypothesisConfig("left", "pedestrian", goal=[17.0, 4.0], geometry=geo(True)),
                HypothesisConfig("right", "pedestrian", goal=[17.0, -4.0], geometry=geo(False)),
            ],
            pairs=[PairConfig(["ego", "pedestrian"], [10.0, 1.0])],
            grid=GridConfig("pedestrian", [14.0, 20.0], 10, [-1.5, 1.5], 7),
        )
    if scenario == "overtaking":
        center = 1.75

        def geo(human_lane):
            g = lambda lane: default_geometry(OVERTAKE_LENGTH, OVERTAKE_WIDTH, lane > center)
            return {"ego-human": g(human_lane), "ego-slow": g(0.0), "human-slow": g(0.0)}

        return ScenarioConfig(
            scenario="overtaking",
            ego=AgentConfig("ego", "unicycle", [0.0, 3.5, 6.0, 0.0], target_lane=3.5, target_speed=8.0),
            others=[
                AgentConfig("human", "unicycle", [10.0, 0.0, 5.0, 0.0], target_lane=0.0, target_speed=5.0),
                AgentConfig("slow", "unicycle", [25.0, 0.0, 4.0, 0.0], target_lane=0.0, target_speed=4.0),
            ],
            hypotheses=[
                HypothesisConfig("merge", "human", target_lane=3.5, geometry=geo(3.5)),
                HypothesisConfig("stay", "human", target_lane=0.0, geometry=geo(0.0)),
            ],
            pairs=[
                PairConfig(["ego", "human"], [1000.0, 1.0]),
                PairConfig(["ego", "slow"], [1000.0, 1.0]),
                PairConfig(["human", "slow"], [1000.0, 1.0]),
            ],
            grid=GridConfig("human", [8.5, 14.5], 10, [-0.5, 0.5], 7),
            solver=SolverSettings(smoothing=3.0, fallback_smoothing=[0.0]),
        )
    raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")


def load_config(path, overrides=()) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = ScenarioConfig.from_dict(data)
    return cfg.with_overrides(overrides) if overrides else cfg


def save_config(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# costs


def car_stage_cost(index: int, lane: float, speed: float, w: CarWeights):
    def cost(zs, t):
        z = zs[index]
        p2, v, psi, a, omega = z[1], z[2], z[3], z[4], z[5]
        progress = v * ad.cos(psi) - speed
        return (
            w.lane * (p2 - lane) ** 2
            + w.progress * progress**2
            + w.velocity * v**2
            + w.heading * psi**2
            + w.acceleration * a**2
            + w.steering * omega**2
        )

    return cost


def pedestrian_stage_cost(index: int, goal, w: PedestrianWeights):
    g1, g2 = float(goal[0]), float(goal[1])

    def cost(zs, t):
        z = zs[index]
        return (
            w.goal * ((z[0] - g1) ** 2 + (z[1] - g2) ** 2)
            + w.velocity * (z[2] ** 2 + z[3] ** 2)
            + w.acceleration * (z[4] ** 2 + z[5] ** 2)
        )

    return cost


def _collision_fn(i: int, j: int, geometry: Geometry, alpha: float):
    n_top, n_side, n_bottom = (tuple(map(float, v)) for v in (geometry.n_top, geometry.n_side, geometry.n_bottom))

    def g(zs):
        d = (zs[i][0] - zs[j][0], zs[i][1] - zs[j][1])
        return [collision_constraint(d, n_top, n_side, n_bottom, alpha)]

    return g


# ---------------------------------------------------------------------------
# builders


def _player(agent: AgentConfig, index: int, cfg: ScenarioConfig, hyp: Optional[HypothesisConfig]) -> PlayerModel:
    if agent.model == "unicycle":
        params = UnicycleParams(cfg.dt, **to_dict(cfg.car_limits))
        lane, speed = agent.target_lane, agent.target_speed
        if hyp is not None and hyp.agent == agent.name and hyp.target_lane is not None:
            lane = hyp.target_lane
        return PlayerModel(
            4,
            2,
            lambda x, u, params=params: unicycle_step(x, u, params),
            np.asarray(agent.initial_state, dtype=float),
            car_stage_cost(index, lane, speed, cfg.car_weights),
            (lambda z, params=params: unicycle_bounds(z, params),),
            agent.name,
        )
    params = PointMassParams(cfg.dt, **to_dict(cfg.pedestrian_limits))
    goal = agent.goal
    if hyp is not None and hyp.agent == agent.name and hyp.goal is not None:
        goal = hyp.goal
    return PlayerModel(
        4,
        2,
        lambda x, u, params=params: point_mass_step(x, u, params),
        np.asarray(agent.initial_state, dtype=float),
        pedestrian_stage_cost(index, goal, cfg.pedestrian_weights),
        (lambda z, params=params: point_mass_bounds(z, params),),
        agent.name,
    )


def build_game(cfg: ScenarioConfig) -> ContingencyGame:
    """Contingency game described by ``cfg`` (either scenario)."""
    names = cfg.agent_names()
    ego = _player(cfg.ego, 0, cfg, None)
    others, shared = [], []
    for h in cfg.hypotheses:
        others.append(tuple(_player(a, i + 1, cfg, h) for i, a in enumerate(cfg.others)))
        row = []
        for p in cfg.pairs:
            i, j = names.index(p.agents[0]), names.index(p.agents[1])
            row.append(
                SharedConstraint(
                    _collision_fn(i, j, h.geometry[p.key], cfg.lse_sharpness),
                    {i: p.ratio[0], j: p.ratio[1]},
                    f"collision:{p.key}",
                )
            )
        shared.append(tuple(row))
    belief = Belief(tuple(h.label for h in cfg.hypotheses), cfg.belief)
    return ContingencyGame(ego, tuple(others), tuple(shared), belief, cfg.branching_time, cfg.horizon, cfg.dt)


def build_jaywalking(cfg: ScenarioConfig) -> ContingencyGame:
    if cfg.scenario != "jaywalking":
        raise ConfigError("build_jaywalking needs scenario = jaywalking")
    if len(cfg.others) != 1 or cfg.others[0].model != "point_mass":
        raise ConfigError("jaywalking needs exactly one pedestrian besides the ego car")
    if len(cfg.hypotheses) != 2:
        raise ConfigError("jaywalking ships with two hypotheses")
    return build_game(cfg)


def build_overtaking(cfg: ScenarioConfig) -> ContingencyGame:
    if cfg.scenario != "overtaking":
        raise ConfigError("build_overtaking needs scenario = overtaking")
    if len(cfg.others) != 2 or any(a.model != "unicycle" for a in cfg.others):
        raise ConfigError("overtaking needs two cars besides the ego car")
    if len(cfg.hypotheses) != 2:
        raise ConfigError("overtaking ships with two hypotheses")
    return build_game(cfg)


def build_scenario(cfg: ScenarioConfig) -> ContingencyGame:
    return build_jaywalking(cfg) if cfg.scenario == "jaywalking" else build_overtaking(cfg)


def collision_pairs(cfg: ScenarioConfig) -> list[tuple[int, int]]:
    names = cfg.agent_names()
    return [(names.index(p.agents[0]), names.index(p.agents[1])) for p in cfg.pairs]
