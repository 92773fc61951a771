import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contingency_games import autodiff as ad

finite = st.floats(-3.0, 3.0, allow_nan=False)


def f_scalar(x):
    return x[0] ** 2 * ad.sin(x[1]) + ad.exp(0.3 * x[0] * x[1]) - x[1] / (1.5 + x[0] ** 2)


def grad_exact(x):
    a, b = x
    e = math.exp(0.3 * a * b)
    den = 1.5 + a * a
    return np.array(
        [2 * a * math.sin(b) + 0.3 * b * e + 2 * a * b / den**2, a * a * math.cos(b) + 0.3 * a * e - 1 / den]
    )


@given(finite, finite)
def test_gradient_matches_closed_form(a, b):
    np.testing.assert_allclose(ad.gradient(f_scalar, [a, b]), grad_exact([a, b]), rtol=1e-10, atol=1e-10)


@given(finite, finite)
def test_hessian_matches_finite_difference_of_gradient(a, b):
    x = np.array([a, b])
    H = ad.hessian(f_scalar, x)
    h = 1e-6
    fd = np.column_stack([(grad_exact(x + h * e) - grad_exact(x - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(H, fd, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(H, H.T, atol=1e-12)


def test_jacobian_of_vector_function():
    F = lambda x: [x[0] * x[1], ad.cos(x[0]), x[2] ** 3]
    x = np.array([0.5, -1.0, 2.0])
    J = ad.jacobian(F, x)
    expected = np.array([[-1.0, 0.5, 0.0], [-math.sin(0.5), 0.0, 0.0], [0.0, 0.0, 12.0]])
    np.testing.assert_allclose(J, expected, atol=1e-14)
    Js = ad.jacobian(F, x, sparse=True)
    np.testing.assert_allclose(Js.toarray(), expected, atol=1e-14)
    assert Js.nnz == 4


def test_sparsity_pattern_is_structural():
    rows, cols = ad.jacobian_sparsity(lambda x: [x[0] * 0.0 + x[2], x[1] ** 2], 3)
    assert sorted(zip(rows.tolist(), cols.tolist())) == [(0, 0), (0, 2), (1, 1)]


def test_batched_values_carry_per_element_derivatives():
    xs = np.linspace(-1, 1, 5)
    d = ad.seed_duals([xs])[0]
    y = ad.tanh(d) * d
    np.testing.assert_allclose(y.value, np.tanh(xs) * xs)
    np.testing.assert_allclose(y.partials[:, 0], np.tanh(xs) + xs * (1 - np.tanh(xs) ** 2))


@pytest.mark.parametrize("op", [abs, lambda x: x > 0, lambda x: max(x, 1.0)])
def test_nonsmooth_operations_are_rejected(op):
    x = ad.seed_duals([0.3])[0]
    with pytest.raises(ad.NonsmoothPrimitiveError):
        op(x)


def test_value_of_tracer_is_an_error():
    with pytest.raises(TypeError):
        ad.value_of(ad.seed_tracers(1)[0])


def test_domain_errors():
    with pytest.raises(ValueError):
        ad.log(ad.seed_duals([-1.0])[0])
    with pytest.raises(ValueError):
        ad.sqrt(ad.seed_duals([-1.0])[0])
