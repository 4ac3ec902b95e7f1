"""Mean-field games and control of McKean-Vlasov dynamics via Pontryagin.

A specification carries the linear drift ``b(x, mu, a) = b1 x + b2 a`` (plus
``b1_bar m(mu)`` for the control problem), a constant volatility and the
costs ``F = F0(x, mu) + F1(x, a)`` and ``G(x, mu)``. The builders return
:class:`~mkvmaster.scenario.Coefficients` of the adjoint system

    dX = b(X, mu, a*) dt + sigma dW
    dY = -dx H(X, mu, Y, a*) dt + Z dW,     Y_T = dx G(X_T, mu_T)

with ``a*`` the minimiser of the Hamiltonian ``H = y'b + F``. For the control
problem the driver and terminal value gain the averages
``int dmu H(x', mu, y', a*')(x) dnu(x', y')`` and ``int dmu G(x', mu)(x) dmu(x')``.

Cost callables are vectorised: ``F0(x, mu) -> (n,)``, ``F1(x, a) -> (n,)``,
``G(x, mu) -> (n,)``; optional analytic derivatives return ``(n, d)`` or
``(n, k)``. Measure derivatives ``dmu_F0(xp, mu, v)`` and ``dmu_G(xp, mu, v)``
return ``(n, p, d)`` for ``n`` source points ``xp`` and ``p`` evaluation
points ``v`` (a size-1 middle axis broadcasts). Missing derivatives are
replaced by central differences in space and by the Lions estimator in the
measure argument.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InvalidInputError, InvalidSpecError
from .grid import brownian_increments
from .lions import MeasureFunctional, lions_derivative
from .lq_oracle import LqSpec
from .measure import EmpiricalMeasure
from .scenario import Coefficients, check_convexity, register_scenario

__all__ = [
    "MfgSpec",
    "MkvControlSpec",
    "hamiltonian",
    "minimize_hamiltonian",
    "build_pontryagin_mfg",
    "build_pontryagin_mkv",
    "equilibrium_flow",
    "value_function",
    "identification_check",
    "averaged_measure_gradient",
    "hjb_residual",
    "lq_mfg_spec",
    "lq_mkv_spec",
    "quadratic_tracking",
    "COSTS",
]

log = logging.getLogger(__name__)


def _matrix(value, rows, cols, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        if rows != cols:
            raise InvalidSpecError(f"{name}: scalar only allowed for square blocks")
        a = a * np.eye(rows)
    if a.shape != (rows, cols):
        raise InvalidSpecError(f"{name} must have shape {(rows, cols)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidSpecError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class MfgSpec:
    """Linear-drift mean-field game.

    If ``R`` is given, ``F1(x, a) = 1/2 a'R a + <offset(x), a> + (terms free
    of a)`` and the minimiser is taken in closed form; ``control_offset``
    defaults to zero. Otherwise the first-order condition is solved by damped
    Newton iterations.
    """

    d: int
    k: int
    b1: object
    b2: object
    sigma: object
    F0: object
    F1: object
    G: object
    dF0_dx: object = None
    dF1_dx: object = None
    dF1_dalpha: object = None
    dG_dx: object = None
    R: object = None
    control_offset: object = None
    label: str = "mfg"
    fd_step: float = 1e-5
    newton_tol: float = 1e-10
    newton_max: int = 60
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        d, k = self.d, self.k
        if d < 1 or k < 1:
            raise InvalidSpecError("dimensions must be positive")
        object.__setattr__(self, "b1", _matrix(self.b1, d, d, "b1"))
        object.__setattr__(self, "b2", _matrix(self.b2, d, k, "b2"))
        object.__setattr__(self, "sigma", _matrix(self.sigma, d, d, "sigma"))
        if self.R is not None:
            R = _matrix(self.R, k, k, "R")
            if not np.allclose(R, R.T):
                raise InvalidSpecError("R must be symmetric")
            try:
                np.linalg.cholesky(R)
            except np.linalg.LinAlgError:
                raise InvalidSpecError("R must be positive definite") from None
            object.__setattr__(self, "R", R)

    def drift(self, x, mu, alpha):
        return x @ self.b1.T + alpha @ self.b2.T

    def drift_mu_adjoint(self, y):
        """``dmu (y' b)(v)``, which vanishes when the drift ignores the law."""
        return np.zeros_like(y)


@dataclass(frozen=True)
class MkvControlSpec(MfgSpec):
    """Control of McKean-Vlasov dynamics: drift ``b1 x + b1_bar m + b2 a``."""

    b1_bar: object = 0.0
    dmu_F0: object = None
    dmu_G: object = None
    label: str = "mkv"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "b1_bar", _matrix(self.b1_bar, self.d, self.d, "b1_bar"))

    def drift(self, x, mu, alpha):
        m = _mean(mu, self.d)
        return x @ self.b1.T + m @ self.b1_bar.T + alpha @ self.b2.T

    def drift_mu_adjoint(self, y):
        return y @ self.b1_bar


def _mean(mu, d):
    if isinstance(mu, EmpiricalMeasure):
        return mu.atoms.mean(axis=0)
    return np.reshape(np.asarray(mu, dtype=float), (d,))


def _rows(a, d):
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, d)


def _fd_grad(fun, x, h):
    """Central-difference gradient of a vectorised ``fun(x) -> (n,)``."""
    n, d = x.shape
    out = np.empty((n, d))
    step = h * (1.0 + np.abs(x))
    for j in range(d):
        e = np.zeros_like(x)
        e[:, j] = step[:, j]
        out[:, j] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step[:, j])
    return out


def hamiltonian(spec, x, mu, y, alpha):
    """``H = y'b(x, mu, a) + F0(x, mu) + F1(x, a)`` (vectorised over rows)."""
    single = np.ndim(x) <= 1
    x, y, alpha = _rows(x, spec.d), _rows(y, spec.d), _rows(alpha, spec.k)
    out = (
        np.sum(y * spec.drift(x, mu, alpha), axis=1)
        + np.asarray(spec.F0(x, mu), dtype=float)
        + np.asarray(spec.F1(x, alpha), dtype=float)
    )
    return float(out[0]) if single else out


def _dF1_dalpha(spec, x, alpha):
    if spec.dF1_dalpha is not None:
        return np.asarray(spec.dF1_dalpha(x, alpha), dtype=float)
    return _fd_grad(lambda a: spec.F1(x, a), alpha, spec.fd_step)


def minimize_hamiltonian(spec, x, mu, y):
    """Minimiser of ``a -> H(x, mu, y, a)``.

    Closed form ``-R^{-1}(b2'y + offset(x))`` when ``R`` is declared; damped
    Newton on ``b2'y + da F1(x, a) = 0`` otherwise, with a central-difference
    Hessian. Raises ConvergenceError if Newton fails to reach ``newton_tol``.
    """
    single = np.ndim(x) <= 1
    x, y = _rows(x, spec.d), _rows(y, spec.d)
    lin = y @ spec.b2
    if spec.R is not None:
        if spec.control_offset is not None:
            lin = lin + np.asarray(spec.control_offset(x), dtype=float)
        a = -np.linalg.solve(spec.R, lin.T).T
        return a[0] if single else a
    a = np.zeros((x.shape[0], spec.k))
    grad = lin + _dF1_dalpha(spec, x, a)
    res = np.linalg.norm(grad, axis=1)
    for _ in range(spec.newton_max):
        if np.max(res) < spec.newton_tol:
            break
        H = np.empty((x.shape[0], spec.k, spec.k))
        for j in range(spec.k):
            h = spec.fd_step * (1.0 + np.abs(a[:, j]))
            e = np.zeros_like(a)
            e[:, j] = h
            H[:, :, j] = (_dF1_dalpha(spec, x, a + e) - _dF1_dalpha(spec, x, a - e)) / (2 * h[:, None])
        try:
            step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Hessian in Hamiltonian minimisation") from None
        lam = np.ones(x.shape[0])
        for _ in range(30):
            trial = a - lam[:, None] * step
            g_trial = lin + _dF1_dalpha(spec, x, trial)
            r_trial = np.linalg.norm(g_trial, axis=1)
            worse = r_trial >= res
            if not np.any(worse & (res > spec.newton_tol)):
                break
            lam = np.where(worse, lam / 2, lam)
        a, grad, res = trial, g_trial, r_trial
    if not np.max(res) < spec.newton_tol:
        raise ConvergenceError(f"Hamiltonian minimisation stalled at |grad| = {np.max(res):.3e}")
    return a[0] if single else a


def _dx(spec, fun, analytic, x, mu):
    if analytic is not None:
        return np.asarray(analytic(x, mu), dtype=float)
    return _fd_grad(lambda z: fun(z, mu), x, spec.fd_step)


def _dF1_dx(spec, x, alpha):
    if spec.dF1_dx is not None:
        return np.asarray(spec.dF1_dx(x, alpha), dtype=float)
    return _fd_grad(lambda z: spec.F1(z, alpha), x, spec.fd_step)


def _sampled_convexity(spec, n=16, seed=0):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x636F6E76])))
    mu = EmpiricalMeasure(rng.normal(size=(8, spec.d)))

    def H(x, mu_, y, a):
        return hamiltonian(spec, x, mu_, y, a)

    samples = []
    for _ in range(n):
        x, y = rng.normal(size=spec.d), rng.normal(size=spec.d)
        a = rng.normal(size=spec.k)
        samples.append((x, mu, y, None, a, x + 0.5 * rng.normal(size=spec.d), a + 0.5 * rng.normal(size=spec.k)))
    return check_convexity(H, samples, h=1e-4)


def _sigma_fn(spec):
    s = spec.sigma
    return lambda x, y, nu: np.broadcast_to(s, (x.shape[0], spec.d, spec.d))


def _build(spec, averaged):
    d = spec.d
    lam = _sampled_convexity(spec)
    flags = dict(spec.flags)
    flags["convexity_lambda"] = lam
    if not lam > 0:
        flags["convexity_not_verified"] = True
        log.warning("%s: sampled convexity constant %.3g is not positive", spec.label, lam)

    def b(x, y, z, nu):
        mu = nu.marginal(slice(0, d))
        return spec.drift(x, mu, minimize_hamiltonian(spec, x, mu, y))

    def f(x, y, z, nu):
        mu = nu.marginal(slice(0, d))
        a = minimize_hamiltonian(spec, x, mu, y)
        out = y @ spec.b1 + _dx(spec, spec.F0, spec.dF0_dx, x, mu) + _dF1_dx(spec, x, a)
        if averaged:
            out = out + _average_running(spec, x, nu)
        return out

    def g(x, mu):
        out = _dx(spec, spec.G, spec.dG_dx, x, mu)
        if averaged:
            out = out + _average_measure_derivative(spec.dmu_G, spec.G, mu, x, spec)
        return out

    bound = float(np.linalg.norm(spec.sigma, 2))
    return Coefficients(d=d, m=d, b=b, sigma=_sigma_fn(spec), f=f, g=g, label=spec.label, sigma_bound=bound, flags=flags)


def _average_running(spec, x, nu):
    d = spec.d
    mu = nu.marginal(slice(0, d))
    ys = nu.atoms[:, d:]
    return spec.drift_mu_adjoint(ys).mean(axis=0) + _average_measure_derivative(spec.dmu_F0, spec.F0, mu, x, spec)


def _average_measure_derivative(dmu, fun, mu, v, spec, chunk=1 << 22):
    """``(1/N) sum_j dmu fun(x_j, mu)(v)`` over the atoms ``x_j`` of ``mu``."""
    src = mu.atoms
    n = src.shape[0]
    if dmu is None:
        # Lions derivative of mu' -> (1/N) sum_j fun(x_j, mu') at the atoms of mu
        phi = MeasureFunctional(lambda m_: float(np.mean(fun(src, m_))), label="averaged cost")
        est = lions_derivative(phi, mu, h=spec.fd_step)
        return np.stack([est.at(p) for p in v])
    step = max(1, chunk // max(1, v.shape[0] * spec.d))
    total = np.zeros((v.shape[0], spec.d))
    for s in range(0, n, step):
        part = np.asarray(dmu(src[s : s + step], mu, v), dtype=float)
        total += np.broadcast_to(part.sum(axis=0), total.shape)
    return total / n


def build_pontryagin_mfg(spec):
    """Coefficients of the mean-field game adjoint system (``m = d``)."""
    return _build(spec, averaged=False)


def build_pontryagin_mkv(spec):
    """Coefficients of the McKean-Vlasov control adjoint system.

    The driver and terminal value consult the whole joint law of ``(X, Y)``
    through the averaged measure derivatives of the Hamiltonian and of ``G``.
    """
    if not isinstance(spec, MkvControlSpec):
        raise InvalidSpecError("build_pontryagin_mkv needs an MkvControlSpec")
    return _build(spec, averaged=True)


# -- quadratic tracking costs -------------------------------------------------


def quadratic_tracking(rho, weight=1.0, d=1):
    """``h(x, mu) = 1/2 (x - rho m)' W (x - rho m)`` with its derivatives.

    Returns ``(h, dx_h, dmu_h)``; ``dmu_h(x', mu)(v) = -rho W (x' - rho m)``
    does not depend on ``v``.
    """
    W = _matrix(weight, d, d, "weight")

    def h(x, mu):
        e = x - rho * _mean(mu, d)
        return 0.5 * np.einsum("ni,ij,nj->n", e, W, e)

    def dx_h(x, mu):
        return (x - rho * _mean(mu, d)) @ W.T

    def dmu_h(xp, mu, v):
        return (-rho * (xp - rho * _mean(mu, d)) @ W.T)[:, None, :]

    return h, dx_h, dmu_h


COSTS = {"quadratic_tracking": quadratic_tracking}


def _lq_parts(lq):
    d = lq.d
    F0, dF0, dmuF0 = quadratic_tracking(lq.rho, lq.Q, d)
    G, dG, dmuG = quadratic_tracking(lq.rho_G, lq.Q_G, d)
    R = lq.R

    def F1(x, a):
        return 0.5 * np.einsum("ni,ij,nj->n", a, R, a)

    common = dict(
        d=d,
        k=d,
        b1=lq.b1,
        b2=lq.b2,
        sigma=lq.sigma,
        F0=F0,
        F1=F1,
        G=G,
        dF0_dx=dF0,
        dF1_dx=lambda x, a: np.zeros_like(x),
        dF1_dalpha=lambda x, a: a @ R.T,
        dG_dx=dG,
        R=R,
    )
    return common, dmuF0, dmuG


def lq_mfg_spec(lq):
    """Game specification matching an :class:`LqSpec` (``b1_bar`` must be 0)."""
    if np.any(lq.b1_bar != 0):
        raise InvalidSpecError("the game drift does not depend on the law; use b1_bar = 0")
    common, _, _ = _lq_parts(lq)
    return MfgSpec(label="lq_mfg", **common)


def lq_mkv_spec(lq):
    common, dmuF0, dmuG = _lq_parts(lq)
    return MkvControlSpec(label="lq_mkv", b1_bar=lq.b1_bar, dmu_F0=dmuF0, dmu_G=dmuG, **common)


@register_scenario("lq_mfg")
def _lq_mfg_scenario(**params):
    return build_pontryagin_mfg(lq_mfg_spec(LqSpec(**params)))


@register_scenario("lq_mkv")
def _lq_mkv_scenario(**params):
    return build_pontryagin_mkv(lq_mkv_spec(LqSpec(**params)))


def _cost(block, d, name):
    if block is None:
        return (lambda x, mu: np.zeros(x.shape[0])), (lambda x, mu: np.zeros_like(x)), (lambda xp, mu, v: np.zeros((xp.shape[0], 1, d)))
    if not isinstance(block, dict) or set(block) - {"name", "params"} or "name" not in block:
        raise InvalidSpecError(f"{name} must be {{'name': ..., 'params': {{...}}}}")
    if block["name"] not in COSTS:
        raise InvalidSpecError(f"unknown cost {block['name']!r}; known: {sorted(COSTS)}")
    try:
        return COSTS[block["name"]](d=d, **block.get("params", {}))
    except TypeError as exc:
        raise InvalidSpecError(f"bad parameters for cost {block['name']!r}: {exc}") from None


def _generic_spec(kind, d=1, b1=0.0, b2=1.0, sigma=1.0, R=1.0, running=None, terminal=None, b1_bar=0.0):
    F0, dF0, dmuF0 = _cost(running, d, "running")
    G, dG, dmuG = _cost(terminal, d, "terminal")
    Rm = _matrix(R, d, d, "R")
    common = dict(
        d=d,
        k=d,
        b1=b1,
        b2=b2,
        sigma=sigma,
        F0=F0,
        F1=lambda x, a: 0.5 * np.einsum("ni,ij,nj->n", a, Rm, a),
        G=G,
        dF0_dx=dF0,
        dF1_dx=lambda x, a: np.zeros_like(x),
        dF1_dalpha=lambda x, a: a @ Rm.T,
        dG_dx=dG,
        R=Rm,
    )
    if kind == "mfg":
        return MfgSpec(label="pontryagin_mfg", **common)
    return MkvControlSpec(label="pontryagin_mkv", b1_bar=b1_bar, dmu_F0=dmuF0, dmu_G=dmuG, **common)


@register_scenario("pontryagin_mfg")
def _pontryagin_mfg_scenario(**params):
    """Game with drift ``b1 x + b2 a``, control cost ``1/2 a'R a`` and costs
    ``running``/``terminal`` chosen from :data:`COSTS`."""
    return build_pontryagin_mfg(_generic_spec("mfg", **params))


@register_scenario("pontryagin_mkv")
def _pontryagin_mkv_scenario(**params):
    return build_pontryagin_mkv(_generic_spec("mkv", **params))


# -- value function -------------------------------------------------------------


def equilibrium_flow(spec, U_field, grid, mu0, seed=0, moment_matching=True):
    """Particle law flow ``mu_k`` under the feedback ``a*(x, U(t, x, mu))``.

    The particles start from the atoms of ``mu0``.
    """
    x = np.array(mu0.atoms, dtype=float)
    n, d = x.shape
    dW = brownian_increments(seed, grid, n, d, moment_matching)
    flow = [EmpiricalMeasure(x)]
    for k in range(grid.K):
        t = grid.time(k)
        mu = flow[-1]
        y = np.reshape(U_field.value(t, x, mu), (n, d))
        a = minimize_hamiltonian(spec, x, mu, y)
        x = x + grid.dt * spec.drift(x, mu, a) + dW[:, k] @ spec.sigma.T
        flow.append(EmpiricalMeasure(x))
    return flow


def value_function(spec, U_field, t, x, mu=None, flow=None, grid=None, n_paths=4096, seed=0):
    """Monte Carlo cost of a tagged player started at ``x`` at time ``t``.

    The population follows ``flow`` (a list of measures on ``grid``, by
    default the field's own snapshots and grid); the player uses the
    feedback ``a*(x, U(s, x, mu_s))``. Returns ``(estimate, standard_error)``.
    Costs are accumulated with the left-point rule on the flow's grid.
    """
    if flow is None:
        flow = getattr(U_field, "snapshots", None)
        grid = getattr(U_field, "grid", None)
    if not flow or grid is None:
        raise InvalidInputError("value_function needs a solved law flow and its grid")
    if len(flow) != grid.K + 1:
        raise InvalidInputError("flow length does not match the grid")
    k0 = grid.index_of(t)
    if mu is not None and not (mu == flow[k0]):
        raise InvalidInputError("mu is not the law of the solved flow at t; re-solve from (t, mu)")
    d = spec.d
    x = np.broadcast_to(np.reshape(np.asarray(x, dtype=float), (1, d)), (n_paths, d)).copy()
    sub = grid.sub(k0, grid.K) if k0 < grid.K else None
    cost = np.zeros(n_paths)
    if sub is not None:
        dW = brownian_increments(seed, sub, n_paths, d, moment_matching=True)
        for j in range(sub.K):
            k = k0 + j
            s, mu_k = grid.time(k), flow[k]
            y = np.reshape(U_field.value(s, x, mu_k), (n_paths, d))
            a = minimize_hamiltonian(spec, x, mu_k, y)
            cost += grid.dt * (np.asarray(spec.F0(x, mu_k)) + np.asarray(spec.F1(x, a)))
            x = x + grid.dt * spec.drift(x, mu_k, a) + dW[:, j] @ spec.sigma.T
    cost += np.asarray(spec.G(x, flow[-1]))
    return float(cost.mean()), float(cost.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0


# -- identifications --------------------------------------------------------------


def _value_rows(V_field, t, x, mu):
    return np.reshape(np.asarray(V_field.value(t, x, mu), dtype=float), (x.shape[0],))


def _dx_value(V_field, t, x, mu, h):
    n, d = x.shape
    out = np.empty((n, d))
    for j in range(d):
        e = np.zeros_like(x)
        e[:, j] = h
        out[:, j] = (_value_rows(V_field, t, x + e, mu) - _value_rows(V_field, t, x - e, mu)) / (2 * h)
    return out


def averaged_measure_gradient(V_field, t, mu, h_mu=None):
    """``int dmu V(t, x', mu)(x^i) dmu(x')`` at every atom ``x^i`` of ``mu``."""
    src = mu.atoms
    phi = MeasureFunctional(lambda m_: float(np.mean(_value_rows(V_field, t, src, m_))), label="averaged value")
    return lions_derivative(phi, mu, h=h_mu)


def identification_check(kind, V_field, U_field, t, x, mu, h_x=1e-4, h_mu=None):
    """Largest discrepancy between ``U`` and the gradient of ``V`` at ``x``.

    ``mfg``: ``|U - dx V|``. ``mkv``: ``|U - dx V - int dmu V(t, x', mu)(x) dmu(x')|``;
    the measure term is only defined at atoms of ``mu`` and any other ``x``
    raises OffSupportError.
    """
    if kind not in ("mfg", "mkv"):
        raise InvalidInputError(f"kind must be 'mfg' or 'mkv', got {kind!r}")
    d = mu.dim
    x = _rows(x, d)
    lhs = np.reshape(U_field.value(t, x, mu), (x.shape[0], d))
    rhs = _dx_value(V_field, t, x, mu, h_x)
    if kind == "mkv":
        est = averaged_measure_gradient(V_field, t, mu, h_mu)
        rhs = rhs + np.stack([est.at(p) for p in x])
    return float(np.max(np.linalg.norm(lhs - rhs, axis=1)))


def hjb_residual(spec, V_field, grid, flow, t, x, h_x=1e-3):
    """HJB residual of ``V`` along a frozen law flow at ``(t, x)``.

    ``d/ds V(s, x, mu_s) + dx V b(x, mu, a*) + F(x, mu, a*) + 1/2 Tr(sigma sigma' dxx V)``
    with ``a*`` minimising the Hamiltonian at ``y = dx V``. The total time
    derivative uses neighbouring flow nodes (central inside, one-sided at
    the ends).
    """
    k = grid.index_of(t)
    if len(flow) != grid.K + 1:
        raise InvalidInputError("flow length does not match the grid")
    d = spec.d
    x = _rows(x, d)
    lo, hi = max(k - 1, 0), min(k + 1, grid.K)
    dv = (_value_rows(V_field, grid.time(hi), x, flow[hi]) - _value_rows(V_field, grid.time(lo), x, flow[lo])) / (
        grid.time(hi) - grid.time(lo)
    )
    mu = flow[k]
    grad = _dx_value(V_field, t, x, mu, h_x)
    a = minimize_hamiltonian(spec, x, mu, grad)
    hess_tr = _trace_term(V_field, t, x, mu, h_x, spec.sigma @ spec.sigma.T)
    res = (
        dv
        + np.sum(grad * spec.drift(x, mu, a), axis=1)
        + np.asarray(spec.F0(x, mu))
        + np.asarray(spec.F1(x, a))
        + 0.5 * hess_tr
    )
    return float(np.max(np.abs(res)))


def _trace_term(V_field, t, x, mu, h, A):
    n, d = x.shape
    v0 = _value_rows(V_field, t, x, mu)
    total = np.zeros(n)
    for i in range(d):
        for j in range(d):
            if A[i, j] == 0.0:
                continue
            if i == j:
                e = np.zeros_like(x)
                e[:, i] = h
                hij = (_value_rows(V_field, t, x + e, mu) - 2 * v0 + _value_rows(V_field, t, x - e, mu)) / h**2
            else:
                ei = np.zeros_like(x)
                ej = np.zeros_like(x)
                ei[:, i] = h
                ej[:, j] = h
                hij = (
                    _value_rows(V_field, t, x + ei + ej, mu)
                    - _value_rows(V_field, t, x + ei - ej, mu)
                    - _value_rows(V_field, t, x - ei + ej, mu)
                    + _value_rows(V_field, t, x - ei - ej, mu)
                ) / (4 * h**2)
            total += A[i, j] * hij
    return total
