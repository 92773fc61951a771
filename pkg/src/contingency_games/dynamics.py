"""Agent models: planar point mass (pedestrians) and kinematic unicycle (cars).

State layouts
    point mass: ``(p1, p2, v1, v2)``, control ``(a1, a2)``
    unicycle:   ``(p1, p2, v, psi)``, control ``(a, omega)``

Zero heading drives along the first planar coordinate. The step maps are
written with :mod:`contingency_games.autodiff` primitives so they accept
floats, arrays and AD numbers alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from contingency_games import autodiff as ad


@dataclass(frozen=True)
class PointMassParams:
    dt: float = 0.2
    v_min: float = -2.0
    v_max: float = 2.0
    a_min: float = -1.0
    a_max: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.v_min < self.v_max and self.a_min < self.a_max):
            raise ValueError("bounds need min < max")


@dataclass(frozen=True)
class UnicycleParams:
    dt: float = 0.2
    v_min: float = 0.0
    v_max: float = 12.0
    a_min: float = -4.0
    a_max: float = 3.0
    omega_min: float = -1.0
    omega_max: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (
            self.v_min < self.v_max
            and self.a_min < self.a_max
            and self.omega_min < self.omega_max
        ):
            raise ValueError("bounds need min < max")


def point_mass_step(x, u, params: PointMassParams):
    p1, p2, v1, v2 = x[0], x[1], x[2], x[3]
    a1, a2 = u[0], u[1]
    dt = params.dt
    half = 0.5 * dt * dt
    return [
        p1 + dt * v1 + half * a1,
        p2 + dt * v2 + half * a2,
        v1 + dt * a1,
        v2 + dt * a2,
    ]


def unicycle_step(x, u, params: UnicycleParams):
    """Backward-Euler unicycle: position advances with the updated heading
    and speed, scaled by ``dt``."""
    p1, p2, v, psi = x[0], x[1], x[2], x[3]
    a, omega = u[0], u[1]
    dt = params.dt
    psi_next = psi + omega * dt
    v_next = v + a * dt
    return [
        p1 + ad.cos(psi_next) * v_next * dt,
        p2 + ad.sin(psi_next) * v_next * dt,
        v_next,
        psi_next,
    ]


def point_mass_bounds(z, params: PointMassParams):
    """``(value - min, max - value)`` for both velocity and both acceleration
    components of a stage vector ``z = (x, u)``."""
    out = []
    for idx in (2, 3):
        out += [z[idx] - params.v_min, params.v_max - z[idx]]
    for idx in (4, 5):
        out += [z[idx] - params.a_min, params.a_max - z[idx]]
    return out


def unicycle_bounds(z, params: UnicycleParams):
    v, a, omega = z[2], z[4], z[5]
    return [
        v - params.v_min,
        params.v_max - v,
        a - params.a_min,
        params.a_max - a,
        omega - params.omega_min,
        params.omega_max - omega,
    ]


def bound_constraints(params, z):
    """Stacked box-constraint values (nonnegative when satisfied).

    ``z`` is a stage vector ``(x, u)`` or an array of them with time on the
    first axis; the result then has one row per stage.
    """
    z = np.asarray(z, dtype=float)
    fn = point_mass_bounds if isinstance(params, PointMassParams) else unicycle_bounds
    if z.ndim == 1:
        return np.array(fn(z, params))
    return np.stack(fn(z.T, params), axis=-1)


def rollout_states(step, x0, controls):
    """States ``x_1..x_T`` from ``x_1 = x0`` and ``x_{t+1} = step(x_t, u_t)``."""
    controls = np.asarray(controls, dtype=float)
    T = controls.shape[0]
    xs = np.empty((T, len(x0)))
    xs[0] = x0
    for t in range(T - 1):
        xs[t + 1] = np.asarray(step(xs[t], controls[t]), dtype=float)
    return xs
