import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contingency_games import autodiff as ad
from contingency_games.config import ConfigError, config_hash
from contingency_games.game import build_kkt_mcp
from contingency_games.scenarios import (
    ScenarioConfig,
    build_scenario,
    collision_constraint,
    default_config,
    default_geometry,
    load_config,
    lse_smooth_max,
    save_config,
)

vals = st.lists(st.floats(-50, 50), min_size=1, max_size=6)


@given(vals, st.floats(0.5, 100))
def test_lse_bounds_the_max(cs, alpha):
    v = float(lse_smooth_max(cs, alpha))
    assert max(cs) - 1e-9 <= v <= max(cs) + np.log(len(cs)) / alpha + 1e-9


def test_lse_gradient_is_softmax():
    cs = [0.1, -0.4, 0.3]
    g = ad.gradient(lambda x: lse_smooth_max(list(x), 5.0), cs)
    w = np.exp(5 * np.array(cs))
    np.testing.assert_allclose(g, w / w.sum(), atol=1e-12)


def test_lse_does_not_overflow():
    assert np.isfinite(float(lse_smooth_max([800.0, 790.0], 10.0)))


def test_collision_margin_sign():
    geo = default_geometry(2.5, 1.2, open_left=True)
    c = lambda d: float(collision_constraint(d, geo.n_top, geo.n_side, geo.n_bottom, 20.0))
    assert c((0.0, 0.0)) < 0  # overlapping
    assert c((4.0, 0.0)) > 0  # well ahead
    assert c((-4.0, 0.0)) > 0  # well behind
    assert c((0.0, -2.0)) > 0  # ego passes on the open (right) side
    assert c((0.0, 2.0)) < 0  # the blocked side stays infeasible alongside


@pytest.mark.parametrize("name", ["jaywalking", "overtaking"])
def test_config_round_trip_and_hash(tmp_path, name):
    cfg = default_config(name)
    path = tmp_path / "c.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg and config_hash(back) == config_hash(cfg)
    assert config_hash(cfg.with_overrides(["lse_sharpness=10"])) != config_hash(cfg)


def test_overrides_and_validation():
    cfg = default_config("jaywalking")
    assert cfg.with_overrides(["belief=[0.9, 0.1]"]).belief == [0.9, 0.1]
    assert cfg.with_overrides(["car_weights.lane=2.5"]).car_weights.lane == 2.5
    with pytest.raises(ConfigError):
        cfg.with_overrides(["no_such_key=1"])
    with pytest.raises(ConfigError):
        cfg.with_overrides(["belief=[0.9, 0.2]"])
    with pytest.raises(ConfigError):
        cfg.with_overrides(["horizon=\"long\""])
    data = cfg.to_dict()
    del data["schema_version"]
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(data)
    with pytest.raises(ConfigError):
        default_config("parking")


def test_unknown_key_is_rejected(tmp_path):
    data = default_config("overtaking").to_dict()
    data["ego"]["colour"] = "red"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigError, match="ego.colour"):
        load_config(path)


@pytest.mark.parametrize("name,players", [("jaywalking", 2), ("overtaking", 3)])
def test_built_games(name, players):
    game = build_scenario(default_config(name))
    assert game.n_players == players and game.K == 2 and game.horizon == 25
    kkt = build_kkt_mcp(game)
    assert kkt.dimension == kkt.lower.size and np.all(kkt.lower < kkt.upper)


def test_hypotheses_change_the_other_players():
    cfg = default_config("overtaking")
    game = build_scenario(cfg)
    zs = [np.zeros(6), np.array([0.0, 0.0, 5.0, 0.0, 0.0, 0.0]), np.zeros(6)]
    merge = game.others[0][0].stage_cost(zs, 0)
    stay = game.others[1][0].stage_cost(zs, 0)
    assert merge > stay  # lane 0 is the stay-lane target


@pytest.mark.parametrize("name", ["jaywalking", "overtaking"])
def test_initial_states_are_collision_free(name):
    cfg = default_config(name)
    for point in cfg.grid.points():
        game = build_scenario(cfg.with_initial_position(cfg.grid.agent, point))
        zs = [np.concatenate([p.initial_state, np.zeros(2)]) for p in game.players(0)]
        for k in range(game.K):
            for sc in game.shared_constraints[k]:
                assert float(sc.function(zs)[0]) > 0
