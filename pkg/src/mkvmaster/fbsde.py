"""Particle solver for the coupled McKean-Vlasov FBSDE.

The solver alternates two passes until the law flow stops moving:

* forward: Euler-Maruyama for ``X`` with ``Y = U(t_k, X_k, mu_k)`` and
  ``Z = dx U sigma`` read from the current field, the joint law ``nu_k`` of
  ``(X_k, Y_k)`` entering the coefficients;
* backward: least-squares regression of ``U(t_{k+1}, X_{k+1}) + dt f`` on a
  polynomial basis in ``X_k``, from ``k = K - 1`` down to 0, which yields the
  next field.

The gap between consecutive law flows is the index-coupled L2 distance of
the ``(X, Y)`` atoms, maximised over steps; since all passes share the same
Brownian increments this coupling is the natural one and it bounds W2 from
above.

Optionally the mean of the law is used as an extra regressor. A single
ensemble cannot separate a mean effect from the intercept, so the solver
then runs several replicas of the particle system whose initial laws are
translated copies of each other, all driven by the same noise, and pools
the regressions across replicas.
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement

import numpy as np
from scipy.special import ndtr

from .errors import (
    BlowUpError,
    ConvergenceError,
    IllConditionedBasisError,
    InvalidInputError,
    InvalidSpecError,
    NumericDomainError,
)
from .grid import INIT_STREAM, TimeGrid, brownian_increments, normal_stream
from .measure import EmpiricalMeasure, coupled_distance, w2_distance
from .scenario import Coefficients, outside_contraction_regime

__all__ = [
    "SolverParams",
    "InitialLawSpec",
    "PolynomialBasis",
    "PathEnsemble",
    "DecouplingField",
    "solve_small_time",
    "solve_long_horizon",
    "decoupling_residual",
    "flow_consistency",
    "weak_lipschitz_estimate",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverParams:
    """Numerical parameters of the particle solver.

    ``replicas`` defaults to ``2 d + 1`` when ``mean_regressor`` is set and to
    1 otherwise. ``delta_min`` defaults to four time steps.
    """

    n_particles: int = 2048
    n_steps: int = 32
    basis_degree: int = 2
    mean_regressor: bool = False
    replicas: int = None
    replica_spread: float = 0.5
    picard_max: int = 30
    tol_law: float = 1e-3
    damping: float = 1.0
    min_damping: float = 1.0 / 64
    delta_min: float = None
    block_length: float = None
    moment_matching: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.n_particles) != self.n_particles or self.n_particles < 2:
            raise InvalidSpecError("n_particles must be an integer >= 2")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidSpecError("n_steps must be a positive integer")
        if int(self.basis_degree) != self.basis_degree or self.basis_degree < 0:
            raise InvalidSpecError("basis_degree must be a nonnegative integer")
        if self.replicas is not None and (int(self.replicas) != self.replicas or self.replicas < 1):
            raise InvalidSpecError("replicas must be a positive integer")
        if self.mean_regressor and self.replicas is not None and self.replicas < 2:
            raise InvalidSpecError("the mean regressor needs at least 2 replicas")
        if not self.replica_spread > 0:
            raise InvalidSpecError("replica_spread must be positive")
        if int(self.picard_max) != self.picard_max or self.picard_max < 1:
            raise InvalidSpecError("picard_max must be a positive integer")
        if not self.tol_law > 0:
            raise InvalidSpecError("tol_law must be positive")
        if not 0 < self.damping <= 1 or not 0 < self.min_damping <= self.damping:
            raise InvalidSpecError("need 0 < min_damping <= damping <= 1")
        if self.delta_min is not None and not self.delta_min > 0:
            raise InvalidSpecError("delta_min must be positive")
        if self.block_length is not None and not self.block_length > 0:
            raise InvalidSpecError("block_length must be positive")

    def n_replicas(self, d):
        if self.replicas is not None:
            return int(self.replicas)
        return 2 * d + 1 if self.mean_regressor else 1


@dataclass(frozen=True)
class InitialLawSpec:
    """Law of ``X_{t0}``: ``normal`` (mean, std), ``uniform`` (low, high) or
    explicit ``atoms`` (exactly ``n_particles`` rows).

    Draws come from a dedicated stream of the run seed, so two specs of the
    same kind sampled with the same seed are coupled atom by atom.
    """

    kind: str = "normal"
    mean: object = 0.0
    std: object = 1.0
    low: object = 0.0
    high: object = 1.0
    atoms: object = None

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "atoms"):
            raise InvalidSpecError(f"unknown initial law {self.kind!r}")
        if self.kind == "atoms" and self.atoms is None:
            raise InvalidSpecError("initial law 'atoms' needs atoms")

    def sample(self, n, d, seed):
        if self.kind == "atoms":
            arr = np.array(self.atoms, dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.shape != (n, d):
                raise InvalidInputError(f"initial atoms have shape {arr.shape}, expected {(n, d)}")
            return arr
        g = normal_stream(seed, INIT_STREAM, (n, d))
        if self.kind == "normal":
            std = np.asarray(self.std, dtype=float)
            if np.any(std < 0):
                raise InvalidSpecError("std must be nonnegative")
            return np.asarray(self.mean, dtype=float) + std * g
        low, high = np.asarray(self.low, dtype=float), np.asarray(self.high, dtype=float)
        return low + (high - low) * ndtr(g)


# -- regression basis -----------------------------------------------------------


class PolynomialBasis:
    """Monomials of total degree ``<= degree`` in standardised coordinates.

    Each time step carries its own centre and scale (from the pooled atoms),
    so ``phi(x) = prod ((x - c) / s)^e``. With ``mean_features`` the
    standardised mean of the measure is appended as ``d`` further features.
    """

    def __init__(self, d, degree, mean_features=False):
        self.d, self.degree, self.mean_features = int(d), int(degree), bool(mean_features)
        exps = [np.zeros(d, dtype=int)]
        for p in range(1, degree + 1):
            for combo in combinations_with_replacement(range(d), p):
                e = np.zeros(d, dtype=int)
                for j in combo:
                    e[j] += 1
                exps.append(e)
        self.exponents = np.array(exps, dtype=int)

    @property
    def n_poly(self):
        return len(self.exponents)

    @property
    def size(self):
        return self.n_poly + (self.d if self.mean_features else 0)

    def describe(self):
        return {
            "kind": "polynomial",
            "degree": self.degree,
            "mean_features": self.mean_features,
            "exponents": self.exponents.tolist(),
        }

    def _power_table(self, u):
        # pw[j][:, p] = u_j ** p for p = 0..degree
        n = u.shape[0]
        out = []
        for j in range(self.d):
            pw = np.ones((n, self.degree + 1))
            for p in range(1, self.degree + 1):
                pw[:, p] = pw[:, p - 1] * u[:, j]
            out.append(pw)
        return out

    def _monomials(self, pw, orders):
        """Product over coordinates of ``d^orders[j] / du_j^orders[j]`` of the monomials."""
        e = self.exponents
        out = np.ones((pw[0].shape[0], self.n_poly))
        for j in range(self.d):
            o = orders[j]
            if o == 0:
                out *= pw[j][:, e[:, j]]
                continue
            fac = np.ones(self.n_poly)
            for i in range(o):
                fac = fac * (e[:, j] - i)
            out *= fac * pw[j][:, np.maximum(e[:, j] - o, 0)]
        return out

    def features(self, x, centre, scale, m=None):
        u = (x - centre) / scale
        out = self._monomials(self._power_table(u), [0] * self.d)
        if self.mean_features:
            mm = np.broadcast_to((np.asarray(m, dtype=float) - centre) / scale, (x.shape[0], self.d))
            out = np.concatenate([out, mm], axis=1)
        return out

    def gradient(self, x, centre, scale):
        """``(n, size, d)`` derivative of the features with respect to ``x``."""
        pw = self._power_table((x - centre) / scale)
        out = np.zeros((x.shape[0], self.size, self.d))
        for j in range(self.d):
            orders = [0] * self.d
            orders[j] = 1
            out[:, : self.n_poly, j] = self._monomials(pw, orders) / scale[j]
        return out

    def hessian(self, x, centre, scale):
        """``(n, size, d, d)`` second derivative of the features."""
        pw = self._power_table((x - centre) / scale)
        out = np.zeros((x.shape[0], self.size, self.d, self.d))
        for j in range(self.d):
            for i in range(j, self.d):
                orders = [0] * self.d
                orders[i] += 1
                orders[j] += 1
                col = self._monomials(pw, orders) / (scale[i] * scale[j])
                out[:, : self.n_poly, i, j] = col
                out[:, : self.n_poly, j, i] = col
        return out


def _fit(phi, target):
    coef, _, rank, _ = np.linalg.lstsq(phi, target, rcond=None)
    if rank < phi.shape[1]:
        raise IllConditionedBasisError(
            f"regression design has rank {rank} < {phi.shape[1]} features; "
            "lower basis_degree or spread the initial law"
        )
    return coef


# -- results --------------------------------------------------------------------


@dataclass(frozen=True)
class PathEnsemble:
    """Particle paths on ``grid``.

    ``X`` is ``(N, K+1, d)``, ``Y`` is ``(N, K+1, m)``, ``Z`` is
    ``(N, K+1, m, d)`` and ``dW`` is ``(N, K, d)``. ``Y`` is built backward
    from ``Y_K = g(X_K, mu_K)`` along each path with ``Z_k = dx U(t_{k+1},
    X_k) sigma_k``; ``Z_K`` is ``dx U(T) sigma`` of the fitted terminal field.
    """

    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    dW: np.ndarray
    seed: int

    @property
    def n(self):
        return self.X.shape[0]

    def measure(self, k):
        return EmpiricalMeasure._trusted(self.X[:, k, :])

    def joint(self, k):
        return EmpiricalMeasure._trusted(np.concatenate([self.X[:, k, :], self.Y[:, k, :]], axis=1))

    def to_csv(self, header_comment=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        n, K1, d = self.X.shape
        m = self.Y.shape[2]
        w.writerow(
            ["particle", "step"]
            + [f"X{j + 1}" for j in range(d)]
            + [f"Y{j + 1}" for j in range(m)]
            + [f"Z{a + 1}_{b + 1}" for a in range(m) for b in range(d)]
        )
        for i in range(n):
            for k in range(K1):
                row = [i, k]
                row += [repr(float(v)) for v in self.X[i, k]]
                row += [repr(float(v)) for v in self.Y[i, k]]
                row += [repr(float(v)) for v in self.Z[i, k].ravel()]
                w.writerow(row)
        return buf.getvalue()


@dataclass
class DecouplingField:
    """Per-step regression representation of ``U(t_k, ., mu_k)``.

    ``value(t, x, mu)`` interpolates linearly in time between grid nodes.
    Without mean features the field represents ``U`` along the solved law
    flow only and the ``mu`` argument is ignored; with mean features it is
    affine in the mean of ``mu``.
    """

    grid: TimeGrid
    basis: PolynomialBasis
    coef: np.ndarray  # (K+1, size, m)
    centre: np.ndarray  # (K+1, d)
    scale: np.ndarray  # (K+1, d)
    snapshots: list
    diagnostics: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def d(self):
        return self.basis.d

    @property
    def m(self):
        return self.coef.shape[2]

    @property
    def t0(self):
        return self.grid.t0

    @property
    def T(self):
        return self.grid.T

    def _mean(self, mu, k):
        if not self.basis.mean_features:
            return None
        if mu is None:
            mu = self.snapshots[k]
        if isinstance(mu, EmpiricalMeasure):
            return mu.atoms.mean(axis=0)
        return np.reshape(np.asarray(mu, dtype=float), (self.d,))

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, self.d)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise InvalidInputError(f"points must have shape (n, {self.d})")
        return x

    def value_at(self, k, x, mu=None):
        x = self._points(x)
        phi = self.basis.features(x, self.centre[k], self.scale[k], self._mean(mu, k))
        return phi @ self.coef[k]

    def gradient_at(self, k, x, mu=None):
        """``(n, m, d)`` spatial derivative at node ``k``."""
        x = self._points(x)
        dphi = self.basis.gradient(x, self.centre[k], self.scale[k])
        return np.einsum("nfd,fm->nmd", dphi, self.coef[k])

    def hessian_at(self, k, x, mu=None):
        x = self._points(x)
        hphi = self.basis.hessian(x, self.centre[k], self.scale[k])
        return np.einsum("nfij,fm->nmij", hphi, self.coef[k])

    def _interp(self, fn, t, x, mu):
        k, w = self.grid.locate(t)
        a = fn(k, x, mu)
        if w == 0.0:
            return a
        b = fn(k + 1, x, mu)
        if w == 1.0:
            return b
        return (1.0 - w) * a + w * b

    def value(self, t, x, mu=None):
        return self._interp(self.value_at, t, x, mu)

    def gradient(self, t, x, mu=None):
        return self._interp(self.gradient_at, t, x, mu)

    def hessian(self, t, x, mu=None):
        return self._interp(self.hessian_at, t, x, mu)

    def to_csv(self, config_hash=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        size, m = self.coef.shape[1:]
        head = ["step", "t"]
        head += [f"centre{j + 1}" for j in range(self.d)] + [f"scale{j + 1}" for j in range(self.d)]
        head += [f"c{f}_{a + 1}" for f in range(size) for a in range(m)]
        if config_hash is not None:
            head.append("config_hash")
        w.writerow(head)
        for k in range(self.grid.K + 1):
            row = [k, repr(float(self.grid.time(k)))]
            row += [repr(float(v)) for v in self.centre[k]] + [repr(float(v)) for v in self.scale[k]]
            row += [repr(float(v)) for v in self.coef[k].ravel()]
            if config_hash is not None:
                row.append(config_hash)
            w.writerow(row)
        return buf.getvalue()

    def metadata(self, config_hash=None):
        g = self.grid
        meta = {
            "grid": {"t0": g.t0, "T": g.T, "K": g.K},
            "d": self.d,
            "m": self.m,
            "basis": self.basis.describe(),
            "seed": self.seed,
            "diagnostics": _jsonable(self.diagnostics),
        }
        if config_hash is not None:
            meta["config_hash"] = config_hash
        return meta

    def to_json(self, config_hash=None):
        return json.dumps(self.metadata(config_hash), sort_keys=True, indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# -- core passes ------------------------------------------------------------------


@dataclass
class _Forward:
    X: np.ndarray  # (R, N, K+1, d)
    Y: np.ndarray  # (R, N, K+1, m)
    Z: np.ndarray  # (R, N, K, m, d)
    S: np.ndarray  # (R, N, K, d, d) diffusion samples


class _Problem:
    """Everything a pass needs: coefficients, grid, noise and initial atoms."""

    def __init__(self, c, grid, params, x0, terminal=None):
        if not isinstance(c, Coefficients):
            raise InvalidInputError("coefficients must be a Coefficients instance")
        self.c, self.grid, self.params = c, grid, params
        self.d, self.m = c.d, c.m
        self.g = terminal if terminal is not None else c.g
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim != 2 or x0.shape[1] != c.d:
            raise InvalidInputError(f"initial atoms must have shape (N, {c.d})")
        self.N = x0.shape[0]
        R = params.n_replicas(c.d)
        self.basis = PolynomialBasis(c.d, params.basis_degree, params.mean_regressor)
        spread = params.replica_spread * _spread(x0)
        shifts = np.zeros((R, c.d))
        for r in range(1, R):
            j = ((r - 1) // 2) % c.d
            shifts[r, j] = spread * (1 if r % 2 else -1) * (1 + (r - 1) // (2 * c.d))
        self.x0 = x0[None, :, :] + shifts[:, None, :]
        self.R = R
        self.dW = brownian_increments(params.seed, grid, self.N, c.d, params.moment_matching)

    def terminal_values(self, XK):
        out = np.empty((self.R, self.N, self.m))
        for r in range(self.R):
            mu = EmpiricalMeasure._trusted(XK[r])
            out[r] = _checked(self.g(XK[r], mu), (self.N, self.m), "g")
        return out

    def forward(self, fld):
        """Euler-Maruyama pass driven by ``fld`` (node-wise coefficients)."""
        R, N, K, d, m = self.R, self.N, self.grid.K, self.d, self.m
        dt = self.grid.dt
        X = np.empty((R, N, K + 1, d))
        Y = np.empty((R, N, K + 1, m))
        Z = np.empty((R, N, K, m, d))
        S = np.empty((R, N, K, d, d))
        X[:, :, 0] = self.x0
        c = self.c
        for k in range(K):
            t = self.grid.time(k)
            for r in range(R):
                x = X[r, :, k]
                mean = x.mean(axis=0)
                y = fld.value_at(k, x, mean)
                nu = EmpiricalMeasure._trusted(np.concatenate([x, y], axis=1))
                sig = _checked(c.sigma(x, y, nu), (N, d, d), "sigma", t)
                z = np.einsum("nmd,nde->nme", fld.gradient_at(k, x, mean), sig)
                b = _checked(c.b(x, y, z, nu), (N, d), "b", t)
                X[r, :, k + 1] = x + dt * b + np.einsum("nde,ne->nd", sig, self.dW[:, k])
                Y[r, :, k], Z[r, :, k], S[r, :, k] = y, z, sig
        Y[:, :, K] = self.terminal_values(X[:, :, K])
        return _Forward(X, Y, Z, S)

    def _design(self, X, k, centre, scale):
        R, N = self.R, self.N
        rows = []
        for r in range(R):
            x = X[r, :, k]
            rows.append(self.basis.features(x, centre, scale, x.mean(axis=0)))
        return np.concatenate(rows, axis=0)

    def backward(self, fw):
        """Regression pass on the paths ``fw``; returns the fitted field and
        per-step diagnostics."""
        R, N, K, d, m = self.R, self.N, self.grid.K, self.d, self.m
        dt = self.grid.dt
        size = self.basis.size
        coef = np.empty((K + 1, size, m))
        centre = np.empty((K + 1, d))
        scale = np.empty((K + 1, d))
        fit_rms = np.zeros(K + 1)
        raw_rms = np.zeros(K + 1)
        for k in range(K + 1):
            pooled = fw.X[:, :, k].reshape(-1, d)
            centre[k] = pooled.mean(axis=0)
            s = pooled.std(axis=0)
            scale[k] = np.where(s > 0, s, 1.0)
        phi = self._design(fw.X, K, centre[K], scale[K])
        target = fw.Y[:, :, K].reshape(-1, m)
        coef[K] = _fit(phi, target)
        fit_rms[K] = raw_rms[K] = _rms(target - phi @ coef[K])
        fld = DecouplingField(self.grid, self.basis, coef, centre, scale, [])
        c = self.c
        for k in range(K - 1, -1, -1):
            t = self.grid.time(k)
            targets, cvs = [], []
            for r in range(R):
                x, y, z = fw.X[r, :, k], fw.Y[r, :, k], fw.Z[r, :, k]
                x1 = fw.X[r, :, k + 1]
                nu = EmpiricalMeasure._trusted(np.concatenate([x, y], axis=1))
                f = _checked(c.f(x, y, z, nu), (N, m), "f", t)
                u1 = fld.value_at(k + 1, x1, x1.mean(axis=0))
                grad1 = fld.gradient_at(k + 1, x, x1.mean(axis=0))
                cv = np.einsum("nmd,nde,ne->nm", grad1, fw.S[r, :, k], self.dW[:, k])
                targets.append(u1 + dt * f)
                cvs.append(cv)
            target = np.concatenate(targets, axis=0)
            cv = np.concatenate(cvs, axis=0)
            phi = self._design(fw.X, k, centre[k], scale[k])
            coef[k] = _fit(phi, target - cv)
            fit_rms[k] = _rms(target - cv - phi @ coef[k])
            raw_rms[k] = _rms(target - phi @ coef[k])
        return fld, {"fit_rms": fit_rms, "raw_rms": raw_rms}

    def initial_field(self):
        """Field equal at every node to the fit of the terminal function on
        the initial atoms."""
        K = self.grid.K
        XK = self.x0
        vals = self.terminal_values(XK)
        d, m = self.d, self.m
        pooled = XK.reshape(-1, d)
        c0, s0 = pooled.mean(axis=0), pooled.std(axis=0)
        s0 = np.where(s0 > 0, s0, 1.0)
        rows = [self.basis.features(XK[r], c0, s0, XK[r].mean(axis=0)) for r in range(self.R)]
        coef0 = _fit(np.concatenate(rows, axis=0), vals.reshape(-1, m))
        return DecouplingField(
            self.grid,
            self.basis,
            np.repeat(coef0[None], K + 1, axis=0),
            np.repeat(c0[None], K + 1, axis=0),
            np.repeat(s0[None], K + 1, axis=0),
            [],
        )

    def pathwise(self, fw, fld):
        """Pathwise backward ``Y`` of replica 0 and the ``Z`` cross-check.

        ``Y_k = Y_{k+1} + dt f_k - Z_k dW_k`` with ``Z_k = dx U(t_{k+1}, X_k) sigma_k``.
        The recursion is evaluated as ``Y_k = U_k(X_k) + e_k`` where ``e_k``
        accumulates the one-step regression residuals; this is the same number
        without the cancellation of the direct form. The regressed ``Z`` (from
        ``E_k[increment dW_k'] / dt``) is only compared with ``dx U(t_k) sigma``
        and reported.
        """
        N, K, d, m = self.N, self.grid.K, self.d, self.m
        dt = self.grid.dt
        X = fw.X[0]
        Y = np.empty((N, K + 1, m))
        Z = np.empty((N, K + 1, m, d))
        Y[:, K] = fw.Y[0, :, K]
        xK = X[:, K]
        yK = Y[:, K]
        nuK = EmpiricalMeasure._trusted(np.concatenate([xK, yK], axis=1))
        sigK = _checked(self.c.sigma(xK, yK, nuK), (N, d, d), "sigma", self.grid.T)
        Z[:, K] = np.einsum("nmd,nde->nme", fld.gradient_at(K, xK, xK.mean(axis=0)), sigK)
        z_err = np.zeros(K + 1)
        err = Y[:, K] - fld.value_at(K, xK, xK.mean(axis=0))
        for k in range(K - 1, -1, -1):
            x, y, z = X[:, k], fw.Y[0, :, k], fw.Z[0, :, k]
            x1 = X[:, k + 1]
            nu = EmpiricalMeasure._trusted(np.concatenate([x, y], axis=1))
            f = _checked(self.c.f(x, y, z, nu), (N, m), "f", self.grid.time(k))
            mean = x.mean(axis=0)
            sig = fw.S[0, :, k]
            # the Z used along the paths is the one of the control variate
            zk = np.einsum("nmd,nde->nme", fld.gradient_at(k + 1, x, x1.mean(axis=0)), sig)
            Z[:, k] = zk
            phi = self.basis.features(x, fld.centre[k], fld.scale[k], mean)
            u_k = phi @ fld.coef[k]
            u_1 = fld.value_at(k + 1, x1, x1.mean(axis=0))
            # Y_{k+1} + dt f - Z dW written as U_k(X_k) + accumulated fit residuals
            resid = u_1 + dt * f - np.einsum("nmd,nd->nm", zk, self.dW[:, k]) - u_k
            err = err + resid
            Y[:, k] = u_k + err
            # cross-check: Z_k = E_k[(U_{k+1} - U_k + dt f) dW_k'] / dt regressed on the basis
            incr = u_1 + dt * f - u_k
            prod = np.einsum("nm,nd->nmd", incr, self.dW[:, k]).reshape(N, m * d) / dt
            phix = phi[:, : self.basis.n_poly]
            zc, *_ = np.linalg.lstsq(phix, prod, rcond=None)
            zreg = (phix @ zc).reshape(N, m, d)
            zfield = np.einsum("nmd,nde->nme", fld.gradient_at(k, x, mean), sig)
            z_err[k] = _rms((zreg - zfield).reshape(N, -1))
        return Y, Z, z_err


def _spread(x0):
    s = float(np.sqrt(np.mean(np.sum((x0 - x0.mean(axis=0)) ** 2, axis=1))))
    return s if s > 0 else 1.0


def _rms(a):
    a = np.reshape(a, (a.shape[0], -1))
    return float(np.sqrt(np.mean(np.sum(a**2, axis=1))))


def _checked(val, shape, label, t=None):
    arr = np.asarray(val, dtype=float)
    if arr.shape != shape:
        try:
            arr = np.broadcast_to(arr, shape)
        except ValueError:
            raise InvalidInputError(f"{label} returned shape {arr.shape}, expected {shape}") from None
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(arr.reshape(shape[0], -1)), axis=1))[0])
        where = "" if t is None else f" at t={t:.6g}"
        raise NumericDomainError(f"{label} is not finite for particle {bad}{where}", index=bad)
    return arr


def _law_gap(a, b):
    gap = 0.0
    for r in range(a.X.shape[0]):
        for k in range(a.X.shape[2]):
            ja = np.concatenate([a.X[r, :, k], a.Y[r, :, k]], axis=1)
            jb = np.concatenate([b.X[r, :, k], b.Y[r, :, k]], axis=1)
            gap = max(gap, float(np.sqrt(np.mean(np.sum((ja - jb) ** 2, axis=1)))))
    return gap


def _blend(new, old, theta):
    if theta == 1.0:
        return new
    return replace(new, coef=theta * new.coef + (1.0 - theta) * old.coef, diagnostics={})


def _finish(prob, fw, fld, info):
    """Attach snapshots/diagnostics and build the returned ensemble."""
    Y, Z, z_err = prob.pathwise(fw, fld)
    K = prob.grid.K
    fld.snapshots = [EmpiricalMeasure._trusted(fw.X[0, :, k].copy()) for k in range(K + 1)]
    fld.seed = prob.params.seed
    ens = PathEnsemble(prob.grid, fw.X[0].copy(), Y, Z, prob.dW, prob.params.seed)
    fit = info["fit_rms"]
    fld.diagnostics.update(
        {
            "fit_rms": info["raw_rms"],
            "cv_fit_rms": fit,
            "fit_diagnostic": float(np.max(info["raw_rms"])),
            "cv_fit_diagnostic": float(np.sqrt(np.sum(fit**2))),
            "z_consistency": z_err,
            "replicas": prob.R,
        }
    )
    fld.diagnostics["decoupling_residual"] = decoupling_residual(ens, fld)
    outside = outside_contraction_regime(prob.c, prob.params.seed)
    fld.diagnostics["outside_contraction_regime"] = outside
    if outside:
        log.warning("driver grows faster than linearly in z; the fixed point is not covered by a contraction bound")
    return ens, fld


def _picard(prob):
    """Law-flow fixed point; returns the last forward pass and its field."""
    p = prob.params
    fld = prob.initial_field()
    fw = prob.forward(fld)
    gaps = []
    theta = p.damping
    for it in range(p.picard_max):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                new, info = prob.backward(fw)
                fld = _blend(new, fld, theta) if it > 0 else new
                fw_new = prob.forward(fld)
        except (NumericDomainError, IllConditionedBasisError) as exc:
            # an iterate that leaves the finite range is a diverging fixed point search
            raise ConvergenceError(
                f"Picard iterate {it + 1} diverged ({exc}); the horizon may be too long for the coupling strength",
                gaps=tuple(gaps[-2:]),
            ) from exc
        gap = _law_gap(fw, fw_new)
        gaps.append(gap)
        log.debug("picard iteration %d: gap %.3e (damping %.4g)", it + 1, gap, theta)
        fw = fw_new
        if gap < p.tol_law:
            return fw, fld, gaps
        if len(gaps) > 1 and gap > gaps[-2] and theta > p.min_damping:
            theta = max(theta / 2, p.min_damping)
            log.info("law gap increased (%.3e > %.3e); damping set to %.4g", gap, gaps[-2], theta)
    raise ConvergenceError(
        f"law flow did not settle after {p.picard_max} Picard iterations "
        f"(last gaps {gaps[-2:]}); the horizon may be too long for the coupling strength",
        gaps=tuple(gaps[-2:]),
    )


def _solve(c, x0, grid, params, terminal=None):
    prob = _Problem(c, grid, params, x0, terminal)
    fw, _, gaps = _picard(prob)
    fld, info = prob.backward(fw)
    fld.diagnostics["picard_gaps"] = gaps
    return _finish(prob, fw, fld, info), prob


def solve_small_time(c, init, grid, params):
    """Solve the FBSDE on ``grid`` by Picard iteration on the law flow.

    Returns ``(PathEnsemble, DecouplingField)``. The field's diagnostics hold
    the Picard gaps, per-step regression residuals (after the control
    variate), the accumulated ``fit_diagnostic``, the ``Z`` consistency
    error and the decoupling residual.

    Raises ConvergenceError when the law gap stays above ``tol_law`` after
    ``picard_max`` iterations (the error carries the last two gaps) and
    IllConditionedBasisError when a regression is rank deficient.
    """
    x0 = init.sample(params.n_particles, c.d, params.seed)
    (ens, fld), _ = _solve(c, x0, grid, params)
    return ens, fld


# -- long horizon ---------------------------------------------------------------


def _block_starts(K, L):
    starts = list(range(K - L, 0, -L))
    return [0] + starts[::-1]


def solve_long_horizon(c, init, t0, T, params):
    """Solve on ``[t0, T]`` by blocks of length ``delta``, walking backward.

    Block ``[a, b]`` is solved with the field of block ``[b, .]`` at time
    ``b`` as terminal condition. Block-start laws come from a forward pass of
    the concatenated field; backward and forward sweeps alternate until the
    block-start laws settle. On failure ``delta`` is halved; below
    ``delta_min`` (default four steps) a BlowUpError is raised.

    Returns ``(PathEnsemble, DecouplingField)`` on the full grid. A single
    block reproduces :func:`solve_small_time` exactly.
    """
    grid = TimeGrid(t0, T, params.n_steps)
    K, dt = grid.K, grid.dt
    delta_min = params.delta_min if params.delta_min is not None else 4 * dt
    delta = params.block_length if params.block_length is not None else T - t0
    x0 = init.sample(params.n_particles, c.d, params.seed)
    history = []
    while True:
        L = min(K, max(1, int(round(delta / dt))))
        if L * dt < delta_min - 1e-12 * (T - t0):
            raise BlowUpError(
                f"block length fell below delta_min={delta_min:.4g} (attempts: {history}); "
                "the field's Lipschitz constant may blow up on this horizon",
                gaps=tuple(h[1] for h in history[-2:]),
            )
        try:
            if L >= K:
                ens, fld = solve_small_time(c, init, grid, params)
            else:
                ens, fld = _blocks(c, x0, grid, params, L)
            fld.diagnostics["block_steps"] = L
            fld.diagnostics["block_history"] = history
            return ens, fld
        except ConvergenceError as exc:
            last = exc.gaps[-1] if exc.gaps else float("nan")
            history.append((L * dt, last))
            log.info("block length %.4g failed (gap %.3e); halving", L * dt, last)
            delta = L * dt / 2


def _blocks(c, x0, grid, params, L):
    K = grid.K
    starts = _block_starts(K, L)
    ends = starts[1:] + [K]
    # initial guess of block-start laws from a forward pass of the terminal fit
    prob = _Problem(c, grid, params, x0)
    fw = prob.forward(prob.initial_field())
    gaps = []
    fields = [None] * len(starts)
    for it in range(params.picard_max):
        fields = [None] * len(starts)
        terminal = None
        for j in range(len(starts) - 1, -1, -1):
            a, b = starts[j], ends[j]
            sub = grid.sub(a, b)
            (_, fld_j), _ = _solve(c, fw.X[0, :, a], sub, params, terminal)
            fields[j] = fld_j
            terminal = _field_terminal(fld_j)
        whole = _concat(grid, prob.basis, fields, starts)
        fw_new = prob.forward(whole)
        gap = max(
            coupled_distance(
                EmpiricalMeasure._trusted(fw.X[0, :, a]), EmpiricalMeasure._trusted(fw_new.X[0, :, a])
            )
            for a in starts
        )
        gaps.append(gap)
        fw = fw_new
        if gap < params.tol_law:
            break
    else:
        raise ConvergenceError(
            f"block-start laws did not settle after {params.picard_max} sweeps", gaps=tuple(gaps[-2:])
        )
    whole = _concat(grid, prob.basis, fields, starts)
    info = {
        "fit_rms": _stitch([f.diagnostics["cv_fit_rms"] for f in fields]),
        "raw_rms": _stitch([f.diagnostics["fit_rms"] for f in fields]),
    }
    whole.diagnostics["picard_gaps"] = gaps
    whole.diagnostics["block_picard_gaps"] = [f.diagnostics["picard_gaps"] for f in fields]
    return _finish(prob, fw, whole, info)


def _stitch(parts):
    return np.concatenate([p[:-1] for p in parts] + [parts[-1][-1:]])


def _field_terminal(fld):
    def g(x, mu):
        return fld.value_at(0, x, mu)

    return g


def _concat(grid, basis, fields, starts):
    K = grid.K
    size, m = fields[0].coef.shape[1:]
    d = basis.d
    coef = np.empty((K + 1, size, m))
    centre = np.empty((K + 1, d))
    scale = np.empty((K + 1, d))
    for j, f in enumerate(fields):
        a = starts[j]
        n = f.grid.K
        coef[a : a + n + 1] = f.coef
        centre[a : a + n + 1] = f.centre
        scale[a : a + n + 1] = f.scale
    # later blocks overwrite the shared node, so it holds the later block's start fit
    for j in range(len(fields) - 1, -1, -1):
        f, a = fields[j], starts[j]
        coef[a] = f.coef[0]
        centre[a] = f.centre[0]
        scale[a] = f.scale[0]
    return DecouplingField(grid, basis, coef, centre, scale, [])


# -- diagnostics ----------------------------------------------------------------


def decoupling_residual(ens, U):
    """``max_k ( mean_i |Y^i_k - U(t_k, X^i_k, mu_k)|^2 )^(1/2)``."""
    if not ens.grid.same_as(U.grid):
        raise InvalidInputError("ensemble and field live on different grids")
    worst = 0.0
    for k in range(ens.grid.K + 1):
        x = ens.X[:, k]
        diff = ens.Y[:, k] - U.value_at(k, x, ens.measure(k))
        worst = max(worst, _rms(diff))
    return worst


def flow_consistency(c, init, grid, params, s):
    """Re-solve from the computed law at node time ``s`` and compare.

    Returns ``sup_{t_k >= s} W2(mu_k, mu'_k) + sup_{t_k >= s} max_i |U - U'|``
    on the atoms of the restarted run. W2 is exact in one dimension; for
    ``d > 1`` the index coupling (an upper bound) is used.
    """
    ks = grid.index_of(s)
    if not 0 < ks < grid.K:
        raise InvalidInputError("s must be an interior grid node")
    ens, fld = solve_small_time(c, init, grid, params)
    sub = grid.sub(ks, grid.K)
    x_s = ens.X[:, ks].copy()
    (ens2, fld2), _ = _solve(c, x_s, sub, params)
    w = 0.0
    field_gap = 0.0
    for j in range(sub.K + 1):
        k = ks + j
        mu1, mu2 = ens.measure(k), ens2.measure(j)
        w = max(w, w2_distance(mu1, mu2) if c.d == 1 else coupled_distance(mu1, mu2))
        x = ens2.X[:, j]
        diff = fld.value_at(k, x, mu1) - fld2.value_at(j, x, mu2)
        field_gap = max(field_gap, float(np.max(np.linalg.norm(diff, axis=1))))
    return w + field_gap


def weak_lipschitz_estimate(c, grid, params, pairs):
    """Sampled ``sup ||Y_t0 - Y'_t0||_2 / ||xi - xi'||_2`` over pairs of
    initial laws; each pair is solved with the same seed, so the two
    ensembles share their Gaussian draws and Brownian increments.

    ``Y_t0`` is read from the fitted field at the initial atoms.
    """
    best = 0.0
    for spec_a, spec_b in pairs:
        xa = spec_a.sample(params.n_particles, c.d, params.seed)
        xb = spec_b.sample(params.n_particles, c.d, params.seed)
        den = float(np.sqrt(np.mean(np.sum((xa - xb) ** 2, axis=1))))
        if den == 0.0:
            raise InvalidInputError("initial laws coincide atom by atom")
        (ea, fa), _ = _solve(c, xa, grid, params)
        (eb, fb), _ = _solve(c, xb, grid, params)
        ya = fa.value_at(0, xa, ea.measure(0))
        yb = fb.value_at(0, xb, eb.measure(0))
        num = float(np.sqrt(np.mean(np.sum((ya - yb) ** 2, axis=1))))
        best = max(best, num / den)
    return best
