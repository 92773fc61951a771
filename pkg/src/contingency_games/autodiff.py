"""Forward-mode automatic differentiation.

Three number types share one set of primitives:

* :class:`Dual` carries a value and a vector of first partials.
* :class:`HyperDual` additionally carries the Hessian; the KKT Jacobian of a
  game needs second derivatives of the Lagrangians.
* :class:`Tracer` carries no numbers at all, only which inputs an expression
  touches (and which input pairs interact nonlinearly). It is used once per
  function to fix the structural sparsity pattern.

Values may be numpy arrays, in which case every leading axis is a batch axis
and the derivative axes are appended at the end. This is how the game code
evaluates all time steps of a horizon in one pass.

Only smooth primitives are provided. ``abs`` and comparisons raise
:class:`NonsmoothPrimitiveError`, which also catches ``max``/``min``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class NonsmoothPrimitiveError(TypeError):
    """Raised when a differentiable expression uses a nonsmooth operation."""


class DomainError(ValueError):
    """Raised when log/sqrt are evaluated outside their domain."""


def _check_log(x):
    if np.any(np.asarray(x) <= 0.0):
        raise DomainError("log evaluated at a non-positive argument")


def _check_sqrt(x):
    if np.any(np.asarray(x) <= 0.0):
        raise DomainError("sqrt derivative undefined at a non-positive argument")


# name -> (f, f', f'', domain check)
_UNARY = {
    "sin": (np.sin, np.cos, lambda x: -np.sin(x), None),
    "cos": (np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x), None),
    "exp": (np.exp, np.exp, np.exp, None),
    "log": (np.log, lambda x: 1.0 / x, lambda x: -1.0 / (x * x), _check_log),
    "sqrt": (
        np.sqrt,
        lambda x: 0.5 / np.sqrt(x),
        lambda x: -0.25 / (x * np.sqrt(x)),
        _check_sqrt,
    ),
    "tanh": (
        np.tanh,
        lambda x: 1.0 - np.tanh(x) ** 2,
        lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
        None,
    ),
}


class _Smooth:
    """Operator plumbing shared by the three number types."""

    # make numpy arrays/scalars defer to our reflected operators
    __array_ufunc__ = None

    def _unary(self, name):  # pragma: no cover - overridden
        raise NotImplementedError

    def sin(self):
        return self._unary("sin")

    def cos(self):
        return self._unary("cos")

    def exp(self):
        return self._unary("exp")

    def log(self):
        return self._unary("log")

    def sqrt(self):
        return self._unary("sqrt")

    def tanh(self):
        return self._unary("tanh")

    def __radd__(self, other):
        return self + other

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        if isinstance(other, _Smooth):
            return self * other._reciprocal()
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, _Smooth):
            return (self.log() * p).exp()
        p = float(p)
        if p == 0.0:
            return self * 0.0 + 1.0
        if p == 1.0:
            return self
        if p == 2.0:
            return self * self
        return self._power(p)

    def __rpow__(self, base):
        return (self * np.log(base)).exp()

    def _nonsmooth(self, *args):
        raise NonsmoothPrimitiveError(
            "nonsmooth operation on a differentiable value; use a smooth surrogate"
        )

    __abs__ = _nonsmooth
    __lt__ = __le__ = __gt__ = __ge__ = _nonsmooth
    __bool__ = _nonsmooth
    __floor__ = __ceil__ = __round__ = _nonsmooth


def _bcast(c, extra):
    """Append ``extra`` singleton axes to a batch-shaped constant."""
    c = np.asarray(c, dtype=float)
    return c.reshape(c.shape + (1,) * extra)


class Dual(_Smooth):
    """Value plus first partials; ``partials.shape == value.shape + (n,)``."""

    __slots__ = ("value", "partials")

    def __init__(self, value, partials):
        self.value = np.asarray(value, dtype=float)
        self.partials = np.asarray(partials, dtype=float)

    @property
    def n(self):
        return self.partials.shape[-1]

    def __repr__(self):
        return f"Dual({self.value!r}, {self.partials!r})"

    def __neg__(self):
        return Dual(-self.value, -self.partials)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.partials + other.partials)
        if isinstance(other, _Smooth):
            return NotImplemented
        return Dual(self.value + other, self.partials + np.zeros_like(_bcast(other, 1)))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.value * other.value,
                self.partials * other.value[..., None] + self.value[..., None] * other.partials,
            )
        if isinstance(other, _Smooth):
            return NotImplemented
        return Dual(self.value * other, self.partials * _bcast(other, 1))

    def _reciprocal(self):
        return self._power(-1.0)

    def _power(self, p):
        v = self.value
        return Dual(v**p, (p * v ** (p - 1.0))[..., None] * self.partials)

    def _unary(self, name):
        f, df, _, check = _UNARY[name]
        if check is not None:
            check(self.value)
        return Dual(f(self.value), df(self.value)[..., None] * self.partials)


class HyperDual(_Smooth):
    """Value, gradient and Hessian.

    ``hessian`` may be ``None`` to stand for an exact zero, which keeps affine
    expressions cheap.
    """

    __slots__ = ("value", "gradient", "hessian")

    def __init__(self, value, gradient, hessian=None):
        self.value = np.asarray(value, dtype=float)
        self.gradient = np.asarray(gradient, dtype=float)
        self.hessian = hessian

    @property
    def n(self):
        return self.gradient.shape[-1]

    def __repr__(self):
        return f"HyperDual({self.value!r}, {self.gradient!r}, {self.hessian!r})"

    def _full_hessian(self):
        if self.hessian is None:
            return np.zeros(self.gradient.shape + (self.n,))
        return self.hessian

    def __neg__(self):
        h = None if self.hessian is None else -self.hessian
        return HyperDual(-self.value, -self.gradient, h)

    def __add__(self, other):
        if isinstance(other, HyperDual):
            if self.hessian is None:
                h = other.hessian
            elif other.hessian is None:
                h = self.hessian
            else:
                h = self.hessian + other.hessian
            return HyperDual(self.value + other.value, self.gradient + other.gradient, h)
        if isinstance(other, _Smooth):
            return NotImplemented
        g = self.gradient + np.zeros_like(_bcast(other, 1))
        h = self.hessian
        if h is not None:
            h = h + np.zeros_like(_bcast(other, 2))
        return HyperDual(self.value + other, g, h)

    def __mul__(self, other):
        if isinstance(other, HyperDual):
            a, b = self, other
            ga, gb = a.gradient, b.gradient
            cross = ga[..., :, None] * gb[..., None, :]
            h = cross + np.swapaxes(cross, -1, -2)
            if a.hessian is not None:
                h = h + a.hessian * b.value[..., None, None]
            if b.hessian is not None:
                h = h + b.hessian * a.value[..., None, None]
            return HyperDual(
                a.value * b.value,
                ga * b.value[..., None] + a.value[..., None] * gb,
                h,
            )
        if isinstance(other, _Smooth):
            return NotImplemented
        h = None if self.hessian is None else self.hessian * _bcast(other, 2)
        return HyperDual(self.value * other, self.gradient * _bcast(other, 1), h)

    def _chain(self, f0, f1, f2):
        g = self.gradient
        h = f2[..., None, None] * (g[..., :, None] * g[..., None, :])
        if self.hessian is not None:
            h = h + f1[..., None, None] * self.hessian
        return HyperDual(f0, f1[..., None] * g, h)

    def _reciprocal(self):
        return self._power(-1.0)

    def _power(self, p):
        v = self.value
        return self._chain(v**p, p * v ** (p - 1.0), p * (p - 1.0) * v ** (p - 2.0))

    def _unary(self, name):
        f, df, d2f, check = _UNARY[name]
        if check is not None:
            check(self.value)
        v = self.value
        return self._chain(f(v), df(v), d2f(v))


class Tracer(_Smooth):
    """Structural dependency tracking.

    ``deps`` is the set of input indices the expression depends on, ``pairs``
    the set of index pairs ``(i, j)`` with ``i <= j`` whose second mixed
    partial may be nonzero.
    """

    __slots__ = ("deps", "pairs")

    def __init__(self, deps=frozenset(), pairs=frozenset()):
        self.deps = frozenset(deps)
        self.pairs = frozenset(pairs)

    def __repr__(self):
        return f"Tracer(deps={sorted(self.deps)})"

    @staticmethod
    def _cross(a, b):
        return {(min(i, j), max(i, j)) for i in a for j in b}

    def __neg__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Tracer):
            return Tracer(self.deps | other.deps, self.pairs | other.pairs)
        if isinstance(other, _Smooth):
            return NotImplemented
        return self

    def __mul__(self, other):
        if isinstance(other, Tracer):
            return Tracer(
                self.deps | other.deps,
                self.pairs | other.pairs | self._cross(self.deps, other.deps),
            )
        if isinstance(other, _Smooth):
            return NotImplemented
        return self

    def _nonlinear(self):
        return Tracer(self.deps, self.pairs | self._cross(self.deps, self.deps))

    def _reciprocal(self):
        return self._nonlinear()

    def _power(self, p):
        return self._nonlinear()

    def _unary(self, name):
        return self._nonlinear()


# ---------------------------------------------------------------------------
# primitives usable on plain floats/arrays and on the number types alike


def _dispatch(name):
    f, _, _, check = _UNARY[name]

    def prim(x):
        if isinstance(x, _Smooth):
            return x._unary(name)
        if check is not None and name in ("log",):
            check(x)
        if name == "sqrt" and np.any(np.asarray(x) < 0.0):
            raise DomainError("sqrt of a negative argument")
        return f(x)

    prim.__name__ = name
    prim.__doc__ = f"Smooth ``{name}`` accepting floats, arrays or AD numbers."
    return prim


sin = _dispatch("sin")
cos = _dispatch("cos")
exp = _dispatch("exp")
log = _dispatch("log")
sqrt = _dispatch("sqrt")
tanh = _dispatch("tanh")


def value_of(x):
    """Plain numeric value of an AD number (identity on floats/arrays)."""
    if isinstance(x, (Dual, HyperDual)):
        return x.value
    if isinstance(x, Tracer):
        raise TypeError("a Tracer carries no value")
    return np.asarray(x, dtype=float)


def is_ad(x):
    return isinstance(x, _Smooth)


# ---------------------------------------------------------------------------
# seeding helpers


def seed_duals(values: Sequence) -> list[Dual]:
    """Dual inputs with unit seeds; each value may be a batch array."""
    vals = [np.asarray(v, dtype=float) for v in values]
    n = len(vals)
    shape = np.broadcast_shapes(*(v.shape for v in vals)) if vals else ()
    out = []
    for j, v in enumerate(vals):
        p = np.zeros(shape + (n,))
        p[..., j] = 1.0
        out.append(Dual(np.broadcast_to(v, shape), p))
    return out


def seed_hyperduals(values: Sequence) -> list[HyperDual]:
    vals = [np.asarray(v, dtype=float) for v in values]
    n = len(vals)
    shape = np.broadcast_shapes(*(v.shape for v in vals)) if vals else ()
    out = []
    for j, v in enumerate(vals):
        g = np.zeros(shape + (n,))
        g[..., j] = 1.0
        out.append(HyperDual(np.broadcast_to(v, shape), g, None))
    return out


def seed_tracers(n: int) -> list[Tracer]:
    return [Tracer({j}) for j in range(n)]


def _as_outputs(y) -> list:
    if isinstance(y, _Smooth) or np.ndim(y) == 0:
        return [y]
    return list(y)


# ---------------------------------------------------------------------------
# user-level API


def gradient(f: Callable, x) -> np.ndarray:
    """Gradient of a scalar function at ``x`` by forward mode."""
    x = np.asarray(x, dtype=float)
    y = f(np.array(seed_duals(x), dtype=object))
    if isinstance(y, np.ndarray) and y.dtype == object:
        y = y.item()
    if isinstance(y, Dual):
        return y.partials.copy()
    return np.zeros_like(x)


def jacobian(F: Callable, x, sparse: bool = False):
    """Jacobian ``J[i, j] = dF_i/dx_j``.

    With ``sparse=True`` a CSC matrix is returned whose stored pattern is the
    structural pattern from :func:`jacobian_sparsity` (a superset of the true
    nonzeros at ``x``).
    """
    x = np.asarray(x, dtype=float)
    ys = _as_outputs(F(np.array(seed_duals(x), dtype=object)))
    J = np.zeros((len(ys), x.size))
    for i, y in enumerate(ys):
        if isinstance(y, Dual):
            J[i] = y.partials
    if not sparse:
        return J
    rows, cols = jacobian_sparsity(F, x.size)
    return sp.csc_matrix((J[rows, cols], (rows, cols)), shape=J.shape)


def hessian(f: Callable, x) -> np.ndarray:
    """Hessian of a scalar function at ``x`` (second-order forward jets)."""
    x = np.asarray(x, dtype=float)
    y = f(np.array(seed_hyperduals(x), dtype=object))
    if isinstance(y, np.ndarray) and y.dtype == object:
        y = y.item()
    if isinstance(y, HyperDual):
        return y._full_hessian().copy()
    return np.zeros((x.size, x.size))


def jacobian_sparsity(F: Callable, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Structural (rows, cols) of the Jacobian of ``F`` with ``n`` inputs.

    One symbolic pass with :class:`Tracer` inputs; no numerical evaluation.
    """
    ys = _as_outputs(F(np.array(seed_tracers(n), dtype=object)))
    rows, cols = [], []
    for i, y in enumerate(ys):
        if isinstance(y, Tracer):
            for j in sorted(y.deps):
                rows.append(i)
                cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)
