"""Lions derivatives through the empirical projection, and chain-rule checks.

For a functional ``U`` on probability measures, the empirical projection
``u^N(x^1, ..., x^N) = U(mean of delta_{x^i})`` satisfies

    d u^N / d x^i = (1/N) dmu U(mu^N)(x^i),

so ``N`` times a central difference of ``u^N`` in the coordinates of atom
``i`` estimates the Lions derivative at that atom. The second-order analogue
``N d^2 u^N / (d x^i)^2`` estimates ``dv dmu U(mu^N)(x^i)`` up to a bias of
order ``1/N`` coming from the second measure derivative; that bias is left in
place on purpose (it is dominated by Monte Carlo error at usual sizes).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericDomainError, OffSupportError
from .grid import TimeGrid, brownian_increments
from .measure import EmpiricalMeasure, std

__all__ = [
    "MeasureFunctional",
    "MomentFunctional",
    "LionsDerivativeEstimate",
    "ParticleFlow",
    "default_step",
    "lions_derivative",
    "lions_second_diag",
    "simulate_flow",
    "chain_rule_residual",
    "full_ito_residual",
]

DEFAULT_REL_STEP = 1e-4


class MeasureFunctional:
    """A map from empirical measures to R (or R^m).

    ``evaluator`` receives an :class:`EmpiricalMeasure`. It must factor
    through the measure, i.e. be invariant under permutations of the atoms.
    """

    def __init__(self, evaluator, label="functional"):
        self.evaluator = evaluator
        self.label = label

    def __call__(self, mu):
        return self.evaluator(mu)

    def __repr__(self):
        return f"{type(self).__name__}({self.label!r})"

    def perturbed(self, atoms, displacement):
        """Values after moving atom ``i`` by ``displacement[i]``, one atom at a time.

        Returns an array whose leading axis runs over the atoms.
        """
        out = []
        for i in range(atoms.shape[0]):
            moved = atoms.copy()
            moved[i] += displacement[i]
            out.append(np.asarray(self.evaluator(EmpiricalMeasure._trusted(moved)), dtype=float))
        return np.stack(out)


class MomentFunctional(MeasureFunctional):
    """``U(mu) = outer(integral of phi d mu)``.

    ``phi`` maps ``(n, d)`` points to ``(n, q)`` features and ``outer`` maps
    ``(..., q)`` moments to ``(...)`` or ``(..., m)`` values. Single-atom
    perturbations update the moment vector in O(1), so all atoms are handled
    in one vectorised call.
    """

    def __init__(self, phi, outer, label="moment functional"):
        self.phi = phi
        self.outer = outer
        super().__init__(self._evaluate, label)

    def _features(self, x):
        f = np.asarray(self.phi(x), dtype=float)
        return f[:, None] if f.ndim == 1 else f

    def _evaluate(self, mu):
        return self.outer(self._features(mu.atoms).mean(axis=0))

    def perturbed(self, atoms, displacement):
        n = atoms.shape[0]
        base = self._features(atoms)
        moments = base.mean(axis=0) + (self._features(atoms + displacement) - base) / n
        return np.asarray(self.outer(moments), dtype=float)


@dataclass
class LionsDerivativeEstimate:
    """Per-atom Lions derivative estimates.

    ``values`` has shape ``(N, d)`` (``order=1``) or ``(N, d, d)``
    (``order=2``) for scalar functionals; vector-valued functionals insert an
    output axis after the atom axis. ``step`` is the base step ``h0``; atom
    ``i`` used ``h0 * (1 + |x^i|)``.
    """

    values: np.ndarray
    step: float
    order: int
    atoms: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.step <= 0:
            raise InvalidInputError("step must be positive")
        if self.values.shape[0] != self.atoms.shape[0]:
            raise InvalidInputError("one estimate per atom is required")

    def at(self, v):
        """Estimate at the atom equal to ``v``; there is no value off the support."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        hits = np.flatnonzero(np.all(self.atoms == v, axis=1))
        if hits.size == 0:
            raise OffSupportError(f"{v} is not an atom of the measure")
        return self.values[hits[0]]


def default_step(mu, rel=DEFAULT_REL_STEP):
    """``rel`` times the ensemble standard deviation (``rel`` if the atoms coincide)."""
    s = std(mu)
    return rel * (s if s > 0 else 1.0)


def _as_functional(U):
    return U if isinstance(U, MeasureFunctional) else MeasureFunctional(U)


def _atom_steps(atoms, h0):
    return h0 * (1.0 + np.linalg.norm(atoms, axis=1))


def _check_finite(arr, label):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        flat = np.reshape(arr, (arr.shape[0], -1))
        bad = int(np.flatnonzero(~np.all(np.isfinite(flat), axis=1))[0])
        raise NumericDomainError(f"{label}: non-finite value when perturbing atom {bad}", index=bad)
    return arr


def _expand(h, ndim):
    return h.reshape(h.shape + (1,) * (ndim - 1))


def lions_derivative(U, mu, h=None):
    """Estimate ``dmu U(mu)(x^i)`` at every atom by central differences.

    Parameters
    ----------
    U : MeasureFunctional or callable
    mu : EmpiricalMeasure
    h : float, optional
        Base step ``h0``; defaults to ``1e-4`` times the ensemble standard
        deviation. Atom ``i`` is moved by ``h0 * (1 + |x^i|)``.
    """
    U = _as_functional(U)
    if h is None:
        h = default_step(mu)
    if not h > 0:
        raise InvalidInputError("h must be positive")
    x = mu.atoms
    n, d = x.shape
    hi = _atom_steps(x, h)
    cols = []
    for j in range(d):
        disp = np.zeros_like(x)
        disp[:, j] = hi
        up = _check_finite(U.perturbed(x, disp), U.label)
        dn = _check_finite(U.perturbed(x, -disp), U.label)
        cols.append(n * (up - dn) / (2.0 * _expand(hi, up.ndim)))
    values = np.stack(cols, axis=-1)
    return LionsDerivativeEstimate(values=values, step=float(h), order=1, atoms=x)


def lions_second_diag(U, mu, h=None):
    """Estimate ``dv dmu U(mu)(x^i)`` (a ``d x d`` block per atom).

    Uses ``N`` times the second central difference of ``u^N`` in atom ``i``.
    The result is biased by ``(1/N) dmu^2 U(mu)(x^i, x^i)``; for
    ``U(mu) = (mean)^2`` in one dimension every block equals ``2/N`` although
    ``dv dmu U = 0``. Pick ``N`` large enough for that bias to be acceptable.
    """
    U = _as_functional(U)
    if h is None:
        h = default_step(mu)
    if not h > 0:
        raise InvalidInputError("h must be positive")
    x = mu.atoms
    n, d = x.shape
    hi = _atom_steps(x, h)
    centre = np.asarray(U(mu), dtype=float)
    out = None

    def shift(*pairs):
        disp = np.zeros_like(x)
        for j, s in pairs:
            disp[:, j] += s * hi
        return _check_finite(U.perturbed(x, disp), U.label)

    for j in range(d):
        up, dn = shift((j, 1)), shift((j, -1))
        if out is None:
            out = np.empty(up.shape + (d, d))
        hh = _expand(hi, up.ndim) ** 2
        out[..., j, j] = n * (up - 2.0 * centre + dn) / hh
        for l in range(j):
            pp = shift((j, 1), (l, 1))
            pm = shift((j, 1), (l, -1))
            mp = shift((j, -1), (l, 1))
            mm = shift((j, -1), (l, -1))
            val = n * (pp - pm - mp + mm) / (4.0 * hh)
            out[..., j, l] = val
            out[..., l, j] = val
    return LionsDerivativeEstimate(values=out, step=float(h), order=2, atoms=x)


@dataclass
class ParticleFlow:
    """Sampled particle paths with their drift and diffusion coefficients.

    ``X`` is ``(N, K+1, d)``; ``drift`` is ``(N, K, d)`` and ``diffusion`` is
    ``(N, K, d, d)``, both evaluated at the left node of each step.
    """

    grid: TimeGrid
    X: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray
    dW: np.ndarray = None

    def __post_init__(self):
        n, kp1, d = self.X.shape
        K = self.grid.K
        if kp1 != K + 1:
            raise InvalidInputError(f"paths have {kp1} nodes, grid has {K + 1}")
        if self.drift.shape != (n, K, d):
            raise InvalidInputError(f"drift shape {self.drift.shape} != {(n, K, d)}")
        if self.diffusion.shape != (n, K, d, d):
            raise InvalidInputError(f"diffusion shape {self.diffusion.shape} != {(n, K, d, d)}")

    @property
    def n(self):
        return self.X.shape[0]

    def measure(self, k):
        return EmpiricalMeasure._trusted(np.ascontiguousarray(self.X[:, k, :]))


def simulate_flow(x0, drift, diffusion, grid, seed, moment_matching=False):
    """Euler-Maruyama simulation of ``dX = drift(t, X) dt + diffusion(t, X) dW``.

    ``drift(t, X)`` returns ``(N, d)``, ``diffusion(t, X)`` returns ``(N, d, d)``.
    """
    x0 = np.asarray(x0.atoms if isinstance(x0, EmpiricalMeasure) else x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    n, d = x0.shape
    dW = brownian_increments(seed, grid, n, d, moment_matching)
    X = np.empty((n, grid.K + 1, d))
    B = np.empty((n, grid.K, d))
    S = np.empty((n, grid.K, d, d))
    X[:, 0] = x0
    for k in range(grid.K):
        t = grid.time(k)
        B[:, k] = drift(t, X[:, k])
        S[:, k] = diffusion(t, X[:, k])
        X[:, k + 1] = X[:, k] + B[:, k] * grid.dt + np.einsum("nij,nj->ni", S[:, k], dW[:, k])
    return ParticleFlow(grid=grid, X=X, drift=B, diffusion=S, dW=dW)


def _measure_generator(flow, U, k, h):
    mu = flow.measure(k)
    b = flow.drift[:, k]
    s = flow.diffusion[:, k]
    a = np.einsum("nij,nkj->nik", s, s)
    d1 = lions_derivative(U, mu, h).values
    d2 = lions_second_diag(U, mu, h).values
    first = np.mean(np.einsum("n...j,nj->n...", d1, b), axis=0)
    second = 0.5 * np.mean(np.einsum("n...ij,nji->n...", d2, a), axis=0)
    return first + second


def chain_rule_residual(U, flow, h=None):
    """Discrepancy in the chain rule for ``t -> U(mu_t)`` along a particle flow.

    Returns ``|U(mu_T) - U(mu_0) - sum_k dt * G_k|`` where ``G_k`` is the
    ensemble average of ``dmu U . b + 1/2 Tr(dv dmu U a)`` at node ``k``.
    The martingale part averages out only at rate ``N^{-1/2}``.
    """
    U = _as_functional(U)
    if not isinstance(flow, ParticleFlow):
        raise InvalidInputError("flow must be a ParticleFlow")
    dt = flow.grid.dt
    total = 0.0
    for k in range(flow.grid.K):
        total = total + dt * _measure_generator(flow, U, k, h)
    jump = np.asarray(U(flow.measure(flow.grid.K)), dtype=float) - np.asarray(U(flow.measure(0)), dtype=float)
    return float(np.max(np.abs(jump - total)))


def full_ito_residual(V, flow, observed_path_index=None, h=None, h_t=None, h_x=None):
    """Discrepancy in the Ito expansion of ``V(t, X_t, [X_t])``.

    ``V(t, x, mu)`` is scalar valued with ``x`` of shape ``(d,)``. The tagged
    process is each particle listed in ``observed_path_index`` (all particles
    when ``None``); both sides are averaged over those particles so the
    stochastic integral drops out. With the tagged particle inside the
    ensemble the expectation carries an ``O(1/N)`` self-interaction term that
    the expansion does not model.
    """
    if not isinstance(flow, ParticleFlow):
        raise InvalidInputError("flow must be a ParticleFlow")
    grid = flow.grid
    n, _, d = flow.X.shape
    if observed_path_index is None:
        obs = np.arange(n)
    else:
        obs = np.atleast_1d(np.asarray(observed_path_index, dtype=int))
        if np.any(obs < 0) or np.any(obs >= n):
            raise InvalidInputError("observed_path_index out of range")
    h_t = h_t if h_t is not None else 1e-4 * max(1.0, grid.T - grid.t0)
    h_x = h_x if h_x is not None else 1e-4
    eye = np.eye(d)

    def val(t, x, mu):
        return float(V(t, x, mu))

    total = 0.0
    for k in range(grid.K):
        t = grid.time(k)
        mu = flow.measure(k)
        b_all = flow.drift[:, k]
        s_all = flow.diffusion[:, k]
        a_all = np.einsum("nij,nkj->nik", s_all, s_all)
        acc = 0.0
        for i in obs:
            x = flow.X[i, k]
            v0 = val(t, x, mu)
            dtv = (val(t + h_t, x, mu) - val(t - h_t, x, mu)) / (2 * h_t)
            grad = np.empty(d)
            hess = np.empty((d, d))
            for j in range(d):
                vp = val(t, x + h_x * eye[j], mu)
                vm = val(t, x - h_x * eye[j], mu)
                grad[j] = (vp - vm) / (2 * h_x)
                hess[j, j] = (vp - 2 * v0 + vm) / h_x**2
                for l in range(j):
                    q = (
                        val(t, x + h_x * (eye[j] + eye[l]), mu)
                        - val(t, x + h_x * (eye[j] - eye[l]), mu)
                        - val(t, x - h_x * (eye[j] - eye[l]), mu)
                        + val(t, x - h_x * (eye[j] + eye[l]), mu)
                    ) / (4 * h_x**2)
                    hess[j, l] = hess[l, j] = q
            functional = MeasureFunctional(lambda m, _t=t, _x=x: val(_t, _x, m), "V(t, x, .)")
            d1 = lions_derivative(functional, mu, h).values
            d2 = lions_second_diag(functional, mu, h).values
            meas = np.mean(np.einsum("nj,nj->n", d1, b_all)) + 0.5 * np.mean(np.einsum("nij,nji->n", d2, a_all))
            acc += dtv + grad @ b_all[i] + 0.5 * np.trace(hess @ a_all[i]) + meas
        total += grid.dt * acc / obs.size
    mu0, muK = flow.measure(0), flow.measure(grid.K)
    jump = np.mean([val(grid.T, flow.X[i, grid.K], muK) - val(grid.t0, flow.X[i, 0], mu0) for i in obs])
    return float(abs(jump - total))
