import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from contingency_games.game import build_kkt_mcp, solve_contingency_game
from contingency_games.scenarios import build_scenario, default_config

REPORT_LINES = []  # acceptance criteria, echoed after the run

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def nominal():
    """Nominal game, KKT system and solution per scenario (solved once)."""
    out = {}
    for name in ("jaywalking", "overtaking"):
        cfg = default_config(name)
        game = build_scenario(cfg)
        kkt = build_kkt_mcp(game)
        sol = solve_contingency_game(game, kkt=kkt, **cfg.solver.solve_kwargs())
        out[name] = (cfg, game, kkt, sol)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
