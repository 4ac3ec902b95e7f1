"""Pointwise residuals of the master equation.

A field is any object with attributes ``t0``, ``T``, ``d``, ``m`` and a
method ``value(t, x, mu)`` mapping ``(n, d)`` points to ``(n, m)`` values.
All derivatives are taken by central differences: in time and space on
``value`` directly, in the measure argument through the Lions estimators of
:mod:`mkvmaster.lions` (so measure terms are only available on the atoms of
``mu``).

The backward master equation for the decoupling field reads

    dt U + dx U b + 1/2 Tr(dxx U a) + f
        + int dmu U(v) b(v) dmu(v) + 1/2 int Tr(dv dmu U(v) a(v)) dmu(v) = 0

with every coefficient evaluated at ``(x, U(t, x, mu), dx U sigma, nu)``,
``a = sigma sigma'`` and ``nu`` the law of ``(xi, U(t, xi, mu))``, ``xi ~ mu``.
"""

from dataclasses import dataclass

import numpy as np

from .control import minimize_hamiltonian
from .errors import InvalidInputError
from .lions import MeasureFunctional, lions_derivative, lions_second_diag
from .measure import EmpiricalMeasure

__all__ = [
    "MeasureLift",
    "MasterResidualBreakdown",
    "MfgResidualBreakdown",
    "ReversedField",
    "lift",
    "master_residual",
    "forward_form_residual",
    "mfg_master_residual",
]


@dataclass(frozen=True)
class MeasureLift:
    """``base`` on R^d and ``lifted`` on R^{d+m} with atoms ``(x^i, U(t, x^i, base))``."""

    base: EmpiricalMeasure
    lifted: EmpiricalMeasure


def _values(field, t, x, mu):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.asarray(field.value(t, x, mu), dtype=float)
    return out.reshape(x.shape[0], -1)


def lift(field, t, mu):
    y = _values(field, t, mu.atoms, mu)
    return MeasureLift(mu, EmpiricalMeasure(np.concatenate([mu.atoms, y], axis=1)))


def _check_time(field, t, h_t):
    t0, T = field.t0, field.T
    if not t0 <= t <= T:
        raise InvalidInputError(f"t={t} outside the field's domain [{t0}, {T}]")
    if not h_t > 0 or 2 * h_t > T - t0:
        raise InvalidInputError("h_t must be positive and fit twice into the time domain")


def _time_derivative(field, t, x, mu, h_t):
    """Central difference, one-sided (first order) when the stencil would leave the domain."""
    _check_time(field, t, h_t)
    lo, hi = t - h_t, t + h_t
    if lo < field.t0:
        lo = t
    if hi > field.T:
        hi = t
    return (_values(field, hi, x, mu) - _values(field, lo, x, mu))[0] / (hi - lo)


def _space_derivatives(field, t, x, mu, h_x):
    """``(U, dx U, dxx U)`` at the rows of ``x``: shapes (n, m), (n, m, d), (n, m, d, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    u0 = _values(field, t, x, mu)
    m = u0.shape[1]
    grad = np.empty((n, m, d))
    hess = np.empty((n, m, d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h_x
        up, dn = _values(field, t, x + e, mu), _values(field, t, x - e, mu)
        grad[:, :, j] = (up - dn) / (2 * h_x)
        hess[:, :, j, j] = (up - 2 * u0 + dn) / h_x**2
        for l in range(j):
            f = np.zeros(d)
            f[l] = h_x
            val = (
                _values(field, t, x + e + f, mu)
                - _values(field, t, x + e - f, mu)
                - _values(field, t, x - e + f, mu)
                + _values(field, t, x - e - f, mu)
            ) / (4 * h_x**2)
            hess[:, :, j, l] = val
            hess[:, :, l, j] = val
    return u0, grad, hess


def _point(x, d):
    x = np.reshape(np.asarray(x, dtype=float), (-1,))
    if x.shape != (d,) or not np.all(np.isfinite(x)):
        raise InvalidInputError(f"x must be a finite point of R^{d}")
    return x[None, :]


def _measure_functional(field, t, x):
    return MeasureFunctional(lambda m_: _values(field, t, x, m_)[0], label="field in its measure argument")


@dataclass(frozen=True)
class MasterResidualBreakdown:
    """The six summands of the master equation at ``(t, x)`` and their sum.

    ``total`` is computed as
    ``dt_term + drift_term + trace_term + driver_term + measure_drift_term + measure_trace_term``.
    """

    dt_term: np.ndarray
    drift_term: np.ndarray
    trace_term: np.ndarray
    driver_term: np.ndarray
    measure_drift_term: np.ndarray
    measure_trace_term: np.ndarray
    total: np.ndarray
    t: float
    x: np.ndarray
    steps: dict

    COMPONENTS = ("dt_term", "drift_term", "trace_term", "driver_term", "measure_drift_term", "measure_trace_term")

    def as_row(self):
        return [getattr(self, c) for c in self.COMPONENTS] + [self.total]


def _sum6(a, b, c, d, e, f):
    return a + b + c + d + e + f


def _spatial_parts(field, coefficients, t, x, mu, h_x, h_mu):
    """Everything except the time derivative, for a field read at time ``t``."""
    c = coefficients
    d = c.d
    nu_lift = lift(field, t, mu)
    nu = nu_lift.lifted
    y, grad, hess = _space_derivatives(field, t, x, mu, h_x)
    sig = np.asarray(c.sigma(x, y, nu), dtype=float).reshape(1, d, d)
    z = np.einsum("nmd,nde->nme", grad, sig)
    b = np.asarray(c.b(x, y, z, nu), dtype=float).reshape(1, d)
    a = np.einsum("nij,nkj->nik", sig, sig)
    drift = np.einsum("nmd,nd->nm", grad, b)[0]
    trace = 0.5 * np.einsum("nmij,nij->nm", hess, a)[0]
    driver = np.asarray(c.f(x, y, z, nu), dtype=float).reshape(-1)

    # coefficients at the atoms of mu, with the field's own values and gradients
    v = mu.atoms
    yv, gv, _ = _space_derivatives(field, t, v, mu, h_x)
    sv = np.asarray(c.sigma(v, yv, nu), dtype=float).reshape(-1, d, d)
    zv = np.einsum("nmd,nde->nme", gv, sv)
    bv = np.asarray(c.b(v, yv, zv, nu), dtype=float).reshape(-1, d)
    av = np.einsum("nij,nkj->nik", sv, sv)

    U_mu = _measure_functional(field, t, x)
    d1 = lions_derivative(U_mu, mu, h_mu).values  # (N, m, d)
    d2 = lions_second_diag(U_mu, mu, h_mu).values  # (N, m, d, d)
    measure_drift = np.einsum("nmd,nd->m", d1, bv) / mu.n
    measure_trace = 0.5 * np.einsum("nmij,nij->m", d2, av) / mu.n
    return drift, trace, driver, measure_drift, measure_trace


def master_residual(field, coefficients, t, x, mu, h_t=1e-3, h_x=1e-3, h_mu=None):
    """Assemble the master-equation residual of ``field`` at ``(t, x, mu)``."""
    x = _point(x, coefficients.d)
    dt = _time_derivative(field, t, x, mu, h_t)
    drift, trace, driver, md, mt = _spatial_parts(field, coefficients, t, x, mu, h_x, h_mu)
    total = _sum6(dt, drift, trace, driver, md, mt)
    return MasterResidualBreakdown(
        dt, drift, trace, driver, md, mt, total, float(t), x[0], {"h_t": h_t, "h_x": h_x, "h_mu": h_mu}
    )


class ReversedField:
    """``u(s, x, mu) = U(t0 + T - s, x, mu)`` on the same time interval."""

    def __init__(self, field):
        self.field = field
        self.t0, self.T = field.t0, field.T
        self.d, self.m = field.d, field.m

    def value(self, s, x, mu):
        return self.field.value(self.t0 + self.T - s, x, mu)


def forward_form_residual(u_field, coefficients, t, x, mu, h_t=1e-3, h_x=1e-3, h_mu=None):
    """``dt u - A u - f - int C u dmu`` for a forward-time field ``u``.

    ``A u = dx u b + 1/2 Tr(dxx u a)`` and
    ``C u(v) = dmu u(v) b(v) + 1/2 Tr(dv dmu u(v) a(v))``. For
    ``u = ReversedField(U)`` this equals minus the master residual of ``U`` at
    the reflected time.
    """
    x = _point(x, coefficients.d)
    dt = _time_derivative(u_field, t, x, mu, h_t)
    drift, trace, driver, md, mt = _spatial_parts(u_field, coefficients, t, x, mu, h_x, h_mu)
    return dt - (drift + trace) - driver - (md + mt)


@dataclass(frozen=True)
class MfgResidualBreakdown:
    dt_term: float
    drift_term: float
    running_term: float
    trace_term: float
    measure_drift_term: float
    measure_trace_term: float
    total: float


def mfg_master_residual(V_field, spec, U_field, t, x, mu, h_t=1e-3, h_x=1e-3, h_mu=None):
    """Residual of the game's master equation for the value ``V``.

    ``dt V + dx V b(x, mu, a*) + F(x, mu, a*) + int dmu V(v) b(v, mu, a*(v)) dmu(v)
    + 1/2 Tr[(dxx V + int dv dmu V dmu) sigma sigma']`` where the feedback
    ``a*(v)`` minimises the Hamiltonian at ``y = U(t, v, mu)``.
    """
    d = spec.d
    x = _point(x, d)
    dt = float(_time_derivative(V_field, t, x, mu, h_t)[0])
    _, grad, hess = _space_derivatives(V_field, t, x, mu, h_x)
    a_mat = spec.sigma @ spec.sigma.T
    y = _values(U_field, t, x, mu).reshape(1, d)
    alpha = minimize_hamiltonian(spec, x, mu, y)
    drift = float(grad[0, 0] @ spec.drift(x, mu, alpha)[0])
    running = float(np.asarray(spec.F0(x, mu))[0] + np.asarray(spec.F1(x, alpha))[0])
    trace = float(0.5 * np.sum(hess[0, 0] * a_mat))

    v = mu.atoms
    yv = _values(U_field, t, v, mu).reshape(-1, d)
    av = minimize_hamiltonian(spec, v, mu, yv)
    bv = spec.drift(v, mu, av)
    V_mu = _measure_functional(V_field, t, x)
    d1 = lions_derivative(V_mu, mu, h_mu).values.reshape(mu.n, d)
    d2 = lions_second_diag(V_mu, mu, h_mu).values.reshape(mu.n, d, d)
    md = float(np.einsum("nd,nd->", d1, bv) / mu.n)
    mt = float(0.5 * np.einsum("nij,ij->", d2, a_mat) / mu.n)
    total = _sum6(dt, drift, running, trace, md, mt)
    return MfgResidualBreakdown(dt, drift, running, trace, md, mt, total)
