"""Closed-form affine fields for linear-quadratic mean-field problems.

Model (``d = k``):

    dX = (b1 X + b1_bar m + b2 a) dt + sigma dW,   m = E[X]
    F  = 1/2 a'R a + 1/2 (x - rho m)' Q (x - rho m)
    G  = 1/2 (x - rho_G m)' Q_G (x - rho_G m)

With ``B = b2 R^{-1} b2'`` and the adjoint ansatz ``Y = eta X + chi m`` the
Pontryagin systems reduce to the matrix Riccati pair

    eta' = -eta b1 - b1' eta + eta B eta - Q,                     eta_T = Q_G
    chi' = c_rho Q - b1' chi - c b1_bar'(eta + chi) - eta b1_bar
           + eta B chi - chi (b1 + b1_bar - B(eta + chi)),        chi_T = -c_G Q_G

where ``c = 0, c_rho = rho, c_G = rho_G`` for the mean-field game and
``c = 1, c_rho = rho (2 - rho), c_G = rho_G (2 - rho_G)`` for the control of
McKean-Vlasov dynamics (the extra factor collects the averaged measure
derivative of the costs, ``-rho (1 - rho) Q m``). For the scalar default
(``b2 = R = Q = Q_G = 1``, ``b1 = b1_bar = 0``) this is
``eta' = eta^2 - 1`` and ``chi' = rho + 2 eta chi + chi^2``.

The value ``V = 1/2 x'P x + x'q m + 1/2 m'r m + s`` along the feedback
``a = -R^{-1} b2'(eta x + chi m)``, writing ``A_x = b1 - B eta``,
``C = b1_bar - B chi`` and ``A_m = A_x + C``, solves

    P' = -(P A_x + A_x' P) - eta B eta - Q,                        P_T = Q_G
    q' = -P C - A_x' q - q A_m - eta B chi + rho Q,                q_T = -rho_G Q_G
    r' = -(q'C + C'q) - (r A_m + A_m' r) - chi' B chi - rho^2 Q,   r_T = rho_G^2 Q_G
    s' = -1/2 Tr(sigma sigma' P),                                  s_T = 0

For the game ``P = eta`` and ``q = chi`` (so ``dx V = U``); for the control
problem ``P = eta`` and ``q + q' + r = chi`` (so ``dx V + int dmu V = U``).
Both identities are asserted after integration.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import InvalidInputError, InvalidSpecError, OracleBlowUpError
from .grid import TimeGrid
from .measure import EmpiricalMeasure

__all__ = [
    "LqSpec",
    "RiccatiSolution",
    "solve_riccati",
    "oracle_field",
    "oracle_value",
    "OracleField",
    "OracleValue",
]

KINDS = ("mfg", "mkv")
_BLOWUP = 1e8


def _mat(value, d, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        a = a * np.eye(d)
    if a.shape != (d, d):
        raise InvalidSpecError(f"{name} must be {d}x{d}, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class LqSpec:
    """Linear-quadratic scenario; scalars are promoted to multiples of the identity."""

    d: int = 1
    rho: float = 0.0
    rho_G: float = None
    sigma: object = 1.0
    b1: object = 0.0
    b1_bar: object = 0.0
    b2: object = 1.0
    R: object = 1.0
    Q: object = 1.0
    Q_G: object = 1.0
    T: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        d = int(self.d)
        if d < 1:
            raise InvalidSpecError("d must be positive")
        object.__setattr__(self, "d", d)
        if self.rho_G is None:
            object.__setattr__(self, "rho_G", self.rho)
        for name in ("sigma", "b1", "b1_bar", "b2", "R", "Q", "Q_G"):
            object.__setattr__(self, name, _mat(getattr(self, name), d, name))
        if not np.allclose(self.R, self.R.T) or np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise InvalidSpecError("R must be symmetric positive definite")
        for name in ("Q", "Q_G"):
            m = getattr(self, name)
            if not np.allclose(m, m.T) or np.min(np.linalg.eigvalsh(m)) < -1e-12:
                raise InvalidSpecError(f"{name} must be symmetric positive semidefinite")
        if self.T <= self.t0:
            raise InvalidSpecError("T must exceed t0")

    @property
    def B(self):
        return self.b2 @ np.linalg.solve(self.R, self.b2.T)

    def coupling(self, kind):
        """``(c, c_rho, c_G)`` of the module docstring."""
        if kind == "mfg":
            return 0.0, self.rho, self.rho_G
        if kind == "mkv":
            return 1.0, self.rho * (2 - self.rho), self.rho_G * (2 - self.rho_G)
        raise InvalidInputError(f"kind must be one of {KINDS}, got {kind!r}")


@dataclass
class RiccatiSolution:
    """Affine field coefficients on ``grid`` plus the fine RK4 trajectory.

    ``eta``, ``chi``, ``P``, ``q``, ``r`` have shape ``(K+1, d, d)``;
    ``kappa`` is ``(K+1, d)`` and ``s`` is ``(K+1,)``.
    """

    kind: str
    grid: TimeGrid
    eta: np.ndarray
    chi: np.ndarray
    kappa: np.ndarray
    P: np.ndarray
    q: np.ndarray
    r: np.ndarray
    s: np.ndarray
    scheme: dict = field(default_factory=dict)
    _spline: object = field(default=None, repr=False)

    def coefficients(self, t):
        """``(eta, chi, kappa, P, q, r, s)`` at any ``t`` in ``[t0, T]``."""
        if t < self.grid.t0 - 1e-12 or t > self.grid.T + 1e-12:
            raise InvalidInputError(f"t={t} outside [{self.grid.t0}, {self.grid.T}]")
        t = min(max(t, self.grid.t0), self.grid.T)
        y = self._spline(t)
        return _unpack(y, self.eta.shape[1])

    def to_csv(self):
        """One row per grid node: ``t``, the entries of ``eta`` then of ``chi``."""
        d = self.eta.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        idx = [(i + 1, j + 1) for i in range(d) for j in range(d)]
        w.writerow(["t"] + [f"eta{i}{j}" for i, j in idx] + [f"chi{i}{j}" for i, j in idx])
        for k in range(self.grid.K + 1):
            row = [repr(float(self.grid.time(k)))]
            row += [repr(float(v)) for v in self.eta[k].ravel()]
            row += [repr(float(v)) for v in self.chi[k].ravel()]
            w.writerow(row)
        return buf.getvalue()


def _pack(eta, chi, P, q, r, s):
    return np.concatenate([eta.ravel(), chi.ravel(), P.ravel(), q.ravel(), r.ravel(), [s]])


def _unpack(y, d):
    dd = d * d
    eta = y[0:dd].reshape(d, d)
    chi = y[dd : 2 * dd].reshape(d, d)
    P = y[2 * dd : 3 * dd].reshape(d, d)
    q = y[3 * dd : 4 * dd].reshape(d, d)
    r = y[4 * dd : 5 * dd].reshape(d, d)
    s = y[5 * dd]
    return eta, chi, np.zeros(d), P, q, r, s


def _rhs_factory(spec, kind):
    c, c_rho, _ = spec.coupling(kind)
    B, b1, bb, Q = spec.B, spec.b1, spec.b1_bar, spec.Q
    a = spec.sigma @ spec.sigma.T
    rho = spec.rho
    d = spec.d

    def rhs(y):
        eta, chi, _, P, q, r, _ = _unpack(y, d)
        Am = b1 + bb - B @ (eta + chi)
        deta = -eta @ b1 - b1.T @ eta + eta @ B @ eta - Q
        dchi = c_rho * Q - b1.T @ chi - c * bb.T @ (eta + chi) - eta @ bb + eta @ B @ chi - chi @ Am
        Ax = b1 - B @ eta
        C = bb - B @ chi
        dP = -(P @ Ax + Ax.T @ P) - eta @ B @ eta - Q
        dq = -P @ C - Ax.T @ q - q @ Am - eta @ B @ chi + rho * Q
        dr = -(q.T @ C + C.T @ q) - (r @ Am + Am.T @ r) - chi.T @ B @ chi - rho**2 * Q
        ds = -0.5 * np.trace(a @ P)
        return _pack(deta, dchi, dP, dq, dr, ds)

    return rhs


def _integrate(rhs, y_T, t0, T, n):
    """Backward RK4 from ``T`` to ``t0`` in ``n`` steps; rows are in increasing time."""
    h = (T - t0) / n
    ys = np.empty((n + 1, y_T.size))
    ys[n] = y_T
    y = y_T
    for i in range(n, 0, -1):
        k1 = rhs(y)
        k2 = rhs(y - 0.5 * h * k1)
        k3 = rhs(y - 0.5 * h * k2)
        k4 = rhs(y - h * k3)
        y = y - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > _BLOWUP:
            raise OracleBlowUpError(f"Riccati solution blew up near t={t0 + (i - 1) * h:.6g}")
        ys[i - 1] = y
    return ys


def solve_riccati(spec, kind="mfg", grid=None, tol=1e-8, min_steps=256, max_doublings=16):
    """Integrate the Riccati and value systems by RK4 on a refined copy of ``grid``.

    The number of RK4 sub-steps per grid interval doubles until a further
    doubling changes ``sup|eta| + sup|chi|`` on the grid by less than ``tol``.
    """
    if kind not in KINDS:
        raise InvalidInputError(f"kind must be one of {KINDS}, got {kind!r}")
    if grid is None:
        grid = TimeGrid(spec.t0, spec.T, 1)
    d = spec.d
    _, _, c_G = spec.coupling(kind)
    y_T = _pack(
        spec.Q_G,
        -c_G * spec.Q_G,
        spec.Q_G,
        -spec.rho_G * spec.Q_G,
        spec.rho_G**2 * spec.Q_G,
        0.0,
    )
    rhs = _rhs_factory(spec, kind)
    sub = max(1, int(np.ceil(min_steps / grid.K)))

    def run(sub):
        ys = _integrate(rhs, y_T, grid.t0, grid.T, grid.K * sub)
        return ys, ys[::sub]

    ys, coarse = run(sub)
    dd = d * d
    for _ in range(max_doublings):
        ys2, coarse2 = run(2 * sub)
        change = np.max(np.abs(coarse2[:, : 2 * dd] - coarse[:, : 2 * dd]))
        sub, ys, coarse = 2 * sub, ys2, coarse2
        if change < tol:
            break
    n = grid.K * sub
    times = grid.t0 + (grid.T - grid.t0) * np.arange(n + 1) / n
    derivs = np.array([rhs(y) for y in ys])
    spline = CubicHermiteSpline(times, ys, derivs, axis=0)

    parts = [_unpack(y, d) for y in coarse]
    eta = np.array([p[0] for p in parts])
    chi = np.array([p[1] for p in parts])
    P = np.array([p[3] for p in parts])
    q = np.array([p[4] for p in parts])
    r = np.array([p[5] for p in parts])
    s = np.array([p[6] for p in parts])
    sol = RiccatiSolution(
        kind=kind,
        grid=grid,
        eta=eta,
        chi=chi,
        kappa=np.zeros((grid.K + 1, d)),
        P=P,
        q=q,
        r=r,
        s=s,
        scheme={"method": "RK4", "steps": n, "self_change": float(change)},
        _spline=spline,
    )
    _assert_identification(sol)
    return sol


def _assert_identification(sol):
    scale = 1.0 + np.max(np.abs(sol.eta)) + np.max(np.abs(sol.chi))
    ok_P = np.max(np.abs(sol.P - sol.eta)) <= 1e-7 * scale
    if sol.kind == "mfg":
        ok_q = np.max(np.abs(sol.q - sol.chi)) <= 1e-7 * scale
    else:
        qqr = sol.q + np.swapaxes(sol.q, 1, 2) + sol.r
        ok_q = np.max(np.abs(qqr - sol.chi)) <= 1e-7 * scale
    assert ok_P and ok_q, "value coefficients inconsistent with the decoupling field"


def _points(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    return np.reshape(x, (-1, d)), single


def _mean_of(mu, d):
    if isinstance(mu, EmpiricalMeasure):
        if mu.dim != d:
            raise InvalidInputError(f"measure has dimension {mu.dim}, expected {d}")
        return mu.atoms.mean(axis=0)
    return np.reshape(np.asarray(mu, dtype=float), (d,))


def oracle_field(sol, t, x, mu):
    """``eta_t x + chi_t m(mu) + kappa_t`` (``x`` may be ``(d,)`` or ``(n, d)``)."""
    d = sol.eta.shape[1]
    eta, chi, kappa, *_ = sol.coefficients(t)
    pts, single = _points(x, d)
    m = _mean_of(mu, d)
    out = pts @ eta.T + chi @ m + kappa
    return out[0] if single else out


def oracle_value(sol, spec, t, x, mu):
    """``1/2 x'P x + x'q m + 1/2 m'r m + s`` at time ``t``."""
    d = spec.d
    _, _, _, P, q, r, s = sol.coefficients(t)
    pts, single = _points(x, d)
    m = _mean_of(mu, d)
    out = 0.5 * np.einsum("ni,ij,nj->n", pts, P, pts) + pts @ (q @ m) + 0.5 * m @ r @ m + s
    return float(out[0]) if single else out


class OracleField:
    """Adapter exposing :func:`oracle_field` through the field interface.

    ``value(t, x, mu)`` takes ``x`` of shape ``(n, d)`` and returns ``(n, d)``.
    """

    def __init__(self, sol):
        self.sol = sol
        self.t0, self.T = sol.grid.t0, sol.grid.T
        self.d = self.m = sol.eta.shape[1]

    def value(self, t, x, mu):
        return oracle_field(self.sol, t, np.reshape(x, (-1, self.d)), mu)


class OracleValue:
    """Scalar field ``V(t, x, mu)`` with ``value`` returning ``(n, 1)``."""

    def __init__(self, sol, spec):
        self.sol, self.spec = sol, spec
        self.t0, self.T = sol.grid.t0, sol.grid.T
        self.d, self.m = spec.d, 1

    def value(self, t, x, mu):
        return oracle_value(self.sol, self.spec, t, np.reshape(x, (-1, self.d)), mu)[:, None]
