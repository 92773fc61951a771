import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contingency_games import autodiff as ad
from contingency_games.dynamics import (
    PointMassParams,
    UnicycleParams,
    bound_constraints,
    point_mass_step,
    rollout_states,
    unicycle_step,
)


def test_unicycle_known_step():
    out = unicycle_step([0.0, 0.0, 1.0, 0.0], [0.0, 0.0], UnicycleParams(dt=0.2))
    np.testing.assert_allclose(out, [0.2, 0.0, 1.0, 0.0])


def test_unicycle_uses_updated_heading_and_speed():
    p = UnicycleParams(dt=0.5)
    out = unicycle_step([1.0, 2.0, 2.0, 0.0], [2.0, np.pi], p)
    v, psi = 3.0, np.pi / 2
    np.testing.assert_allclose(out, [1.0 + 0.5 * v * np.cos(psi), 2.0 + 0.5 * v * np.sin(psi), v, psi], atol=1e-14)


def test_point_mass_known_step():
    np.testing.assert_allclose(point_mass_step([0, 0, 0, 0], [1.0, 0.0], PointMassParams(dt=0.2)), [0.02, 0, 0.2, 0])


def test_rollout_is_constant_velocity_with_zero_controls():
    xs = rollout_states(lambda x, u: unicycle_step(x, u, UnicycleParams()), [0, 0, 1, 0], np.zeros((3, 2)))
    np.testing.assert_allclose(xs[:, 0], [0.0, 0.2, 0.4])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 10), st.floats(-1, 1), st.floats(-3, 3), st.floats(-1, 1))
def test_unicycle_jacobian_matches_finite_differences(p1, p2, v, psi, a, w):
    prm = UnicycleParams()
    z = np.array([p1, p2, v, psi, a, w])
    F = lambda s: unicycle_step(s[:4], s[4:], prm)
    J = ad.jacobian(F, z)
    h = 1e-6
    fd = np.column_stack([(np.array(F(z + h * e)) - np.array(F(z - h * e))) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(J, fd, atol=1e-6)


def test_bounds_sign_convention():
    prm = UnicycleParams()
    inside = bound_constraints(prm, [0, 0, 5, 0, 0, 0])
    assert np.all(inside > 0)
    outside = bound_constraints(prm, [0, 0, 13, 0, 0, 0])
    assert outside[1] == pytest.approx(-1.0)
    batch = bound_constraints(PointMassParams(), np.zeros((4, 6)))
    assert batch.shape == (4, 8)


def test_invalid_params():
    with pytest.raises(ValueError):
        UnicycleParams(dt=0)
    with pytest.raises(ValueError):
        PointMassParams(v_min=1.0, v_max=0.0)
