"""Coefficients of the McKean-Vlasov FBSDE and sampled hypothesis checks.

The system is

    dX = b(X, Y, Z, nu) dt + sigma(X, Y, nu) dW
    dY = -f(X, Y, Z, nu) dt + Z dW,      Y_T = g(X_T, mu_T)

with ``nu`` the joint law of ``(X, Y)`` and ``mu`` the law of ``X``. All
coefficient callables are vectorised over particles:

    b(x, y, z, nu)  -> (n, d)      x: (n, d), y: (n, m), z: (n, m, d)
    sigma(x, y, nu) -> (n, d, d)   nu: EmpiricalMeasure on R^{d+m}
    f(x, y, z, nu)  -> (n, m)
    g(x, mu)        -> (n, m)      mu: EmpiricalMeasure on R^d

Lipschitz constants, Lasry-Lions monotonicity and convexity of the
Hamiltonian can only be certified on samples; every report carries the seed
and sample count that produced it.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidSpecError, NumericDomainError
from .measure import EmpiricalMeasure, w2_distance

__all__ = [
    "Coefficients",
    "HypothesisReport",
    "SeededSampler",
    "SCENARIOS",
    "register_scenario",
    "build_scenario",
    "estimate_lipschitz",
    "z_growth_ratio",
    "outside_contraction_regime",
    "check_lasry_lions",
    "check_convexity",
]


@dataclass(frozen=True)
class Coefficients:
    d: int
    m: int
    b: object
    sigma: object
    f: object
    g: object
    label: str = "coefficients"
    sigma_bound: float = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise InvalidSpecError("dimensions must be positive")

    def x_marginal(self, nu):
        return nu.marginal(slice(0, self.d))


def _zeros(n, *shape):
    return np.zeros((n,) + shape)


def _const_sigma(s, d):
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        s = s * np.eye(d)
    return lambda x, y, nu: np.broadcast_to(s, (x.shape[0], d, d))


# -- registry ----------------------------------------------------------------

SCENARIOS = {}


def register_scenario(name):
    def deco(fn):
        SCENARIOS[name] = fn
        return fn

    return deco


def build_scenario(name, params=None):
    """Instantiate a registered scenario; unknown parameters are rejected."""
    if name not in SCENARIOS:
        raise InvalidSpecError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}")
    try:
        return SCENARIOS[name](**(params or {}))
    except TypeError as exc:
        raise InvalidSpecError(f"bad parameters for scenario {name!r}: {exc}") from None


@register_scenario("constant_terminal")
def _constant_terminal(value=1.0, d=1, sigma=1.0):
    c = np.atleast_1d(np.asarray(value, dtype=float))
    m = c.size
    return Coefficients(
        d=d,
        m=m,
        b=lambda x, y, z, nu: _zeros(x.shape[0], d),
        sigma=_const_sigma(sigma, d),
        f=lambda x, y, z, nu: _zeros(x.shape[0], m),
        g=lambda x, mu: np.broadcast_to(c, (x.shape[0], m)).copy(),
        label="constant_terminal",
        sigma_bound=float(np.linalg.norm(np.atleast_2d(sigma), 2)) if np.ndim(sigma) else abs(float(sigma)),
    )


@register_scenario("decoupled_linear")
def _decoupled_linear(d=1, sigma=1.0):
    """``b = f = 0``, ``g(x) = x``: the field is ``U(t, x) = x`` and ``Z = sigma``."""
    return Coefficients(
        d=d,
        m=d,
        b=lambda x, y, z, nu: _zeros(x.shape[0], d),
        sigma=_const_sigma(sigma, d),
        f=lambda x, y, z, nu: _zeros(x.shape[0], d),
        g=lambda x, mu: x.copy(),
        label="decoupled_linear",
        sigma_bound=abs(float(sigma)) if np.ndim(sigma) == 0 else float(np.linalg.norm(sigma, 2)),
    )


@register_scenario("heat_quadratic")
def _heat_quadratic(d=1):
    """``b = f = 0``, ``sigma = I``, ``g = |x|^2``: ``U = |x|^2 + d (T - t)``."""
    return Coefficients(
        d=d,
        m=1,
        b=lambda x, y, z, nu: _zeros(x.shape[0], d),
        sigma=_const_sigma(1.0, d),
        f=lambda x, y, z, nu: _zeros(x.shape[0], 1),
        g=lambda x, mu: (x**2).sum(axis=1, keepdims=True),
        label="heat_quadratic",
        sigma_bound=1.0,
    )


@register_scenario("frozen")
def _frozen(d=1):
    """No drift and no noise; particles never move."""
    return Coefficients(
        d=d,
        m=d,
        b=lambda x, y, z, nu: _zeros(x.shape[0], d),
        sigma=_const_sigma(0.0, d),
        f=lambda x, y, z, nu: _zeros(x.shape[0], d),
        g=lambda x, mu: x.copy(),
        label="frozen",
        sigma_bound=0.0,
    )


@register_scenario("linear_drift")
def _linear_drift(slope=2.0):
    """``b(x) = slope * x`` and nothing else; used to exercise the Lipschitz sampler."""
    return Coefficients(
        d=1,
        m=1,
        b=lambda x, y, z, nu: slope * x,
        sigma=_const_sigma(1.0, 1),
        f=lambda x, y, z, nu: _zeros(x.shape[0], 1),
        g=lambda x, mu: _zeros(x.shape[0], 1),
        label="linear_drift",
        sigma_bound=1.0,
    )


# -- hypothesis checks -------------------------------------------------------


@dataclass
class HypothesisReport:
    """Sampled lower bounds for the constants of the standing assumptions."""

    lipschitz_L: dict
    sigma_bound: float
    sample_count: int
    seed: int
    convexity_lambda: float = None
    monotonicity_min: float = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)


@dataclass(frozen=True)
class SeededSampler:
    """Deterministic generator of coefficient argument pairs.

    Sample ``s`` is drawn from its own Philox stream keyed by ``(seed, s)``,
    so the first ``n`` samples do not depend on how many are requested.
    Samples alternate between perturbing a single argument (x, y, z, a
    translation of the measure, the measure atoms) and perturbing all of them.
    """

    seed: int = 0
    scale: float = 1.0
    n_atoms: int = 6

    MODES = ("x", "y", "z", "shift", "atoms", "all")

    def sample(self, s, d, m):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, s])))
        sc = self.scale
        x = rng.normal(scale=sc, size=(1, d))
        y = rng.normal(scale=sc, size=(1, m))
        z = rng.normal(scale=sc, size=(1, m, d))
        atoms = rng.normal(scale=sc, size=(self.n_atoms, d + m))
        mode = self.MODES[s % len(self.MODES)]
        eps = sc * 10 ** rng.uniform(-3, 0)
        x2, y2, z2, atoms2 = x.copy(), y.copy(), z.copy(), atoms.copy()
        if mode in ("x", "all"):
            x2 = x + eps * rng.normal(size=x.shape)
        if mode in ("y", "all"):
            y2 = y + eps * rng.normal(size=y.shape)
        if mode in ("z", "all"):
            z2 = z + eps * rng.normal(size=z.shape)
        if mode == "shift":
            atoms2 = atoms + eps * rng.normal(size=(1, d + m))
        if mode in ("atoms", "all"):
            atoms2 = atoms + eps * rng.normal(size=atoms.shape)
        return (x, y, z, EmpiricalMeasure(atoms)), (x2, y2, z2, EmpiricalMeasure(atoms2))


def _finite(val, label, s):
    val = np.asarray(val, dtype=float)
    if not np.all(np.isfinite(val)):
        raise NumericDomainError(f"{label} returned a non-finite value on sample {s}", index=s)
    return val


def estimate_lipschitz(c, sampler, n):
    """Largest sampled difference quotient of each coefficient.

    The quotient is ``|h(p) - h(p')| / (|x - x'| + |y - y'| + |z - z'| + W2(nu, nu'))``
    with Frobenius norms for matrices. The result bounds the true constant
    from below.
    """
    if n < 2:
        raise InvalidInputError("n must be at least 2")
    d, m = c.d, c.m
    best = {"b": 0.0, "sigma": 0.0, "f": 0.0, "g": 0.0}
    sig_bound = 0.0
    for s in range(n):
        (x, y, z, nu), (x2, y2, z2, nu2) = sampler.sample(s, d, m)
        mu, mu2 = c.x_marginal(nu), c.x_marginal(nu2)
        dx = np.linalg.norm(x - x2)
        dy = np.linalg.norm(y - y2)
        dz = np.linalg.norm(z - z2)
        dnu = w2_distance(nu, nu2)
        dmu = w2_distance(mu, mu2)
        full = dx + dy + dz + dnu
        pairs = {
            "b": (c.b(x, y, z, nu), c.b(x2, y2, z2, nu2), full),
            "sigma": (c.sigma(x, y, nu), c.sigma(x2, y2, nu2), full),
            "f": (c.f(x, y, z, nu), c.f(x2, y2, z2, nu2), full),
            "g": (c.g(x, mu), c.g(x2, mu2), dx + dmu),
        }
        for name, (h1, h2, dist) in pairs.items():
            h1 = _finite(h1, name, s)
            h2 = _finite(h2, name, s)
            if dist > 0:
                best[name] = max(best[name], float(np.linalg.norm(h1 - h2)) / dist)
        sig = _finite(c.sigma(x, y, nu), "sigma", s)
        sig_bound = max(sig_bound, float(np.linalg.norm(sig[0], 2)))
    return HypothesisReport(lipschitz_L=best, sigma_bound=sig_bound, sample_count=n, seed=sampler.seed)


def z_growth_ratio(c, seed=0, n=12, far=100.0):
    """Worst ratio of the driver's local slope in ``z`` at ``far * z`` to that at ``z``.

    A driver Lipschitz in ``z`` keeps the ratio bounded near 1; a driver with
    quadratic growth in ``z`` gives a ratio of order ``far``. Samples where
    the driver does not depend on ``z`` are skipped (ratio 0 if all are).
    """
    sampler = SeededSampler(seed=seed)
    worst = 0.0
    for s in range(n):
        (x, y, z, nu), _ = sampler.sample(s, c.d, c.m)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, s, 1])))
        dz = 1e-4 * rng.normal(size=z.shape)
        f0 = _finite(c.f(x, y, z, nu), "f", s)
        near = np.linalg.norm(_finite(c.f(x, y, z + dz, nu), "f", s) - f0)
        zf = far * z
        slope = np.linalg.norm(_finite(c.f(x, y, zf + dz, nu), "f", s) - _finite(c.f(x, y, zf, nu), "f", s))
        if near > 1e-12 * (1 + np.linalg.norm(f0)):
            worst = max(worst, float(slope / near))
        elif slope > 1e-10:
            worst = max(worst, float(far))
    return worst


def outside_contraction_regime(c, seed=0, threshold=10.0):
    """True when the driver was declared or detected to grow faster than linearly in ``z``."""
    if c.flags.get("quadratic_in_z"):
        return True
    return z_growth_ratio(c, seed) > threshold


def _integral(h, mu, nu_meas):
    return float(np.mean(np.asarray(h(mu.atoms, nu_meas), dtype=float)))


def check_lasry_lions(h, pairs):
    """Minimum over ``pairs`` of ``int (h(x, mu) - h(x, mu')) d(mu - mu')(x)``.

    ``h(x, mu)`` maps ``(n, d)`` points to ``(n,)`` values. Integrals are
    exact sums over the atoms. A nonnegative result means monotonicity holds
    on the sample.
    """
    values = []
    for mu, mu2 in pairs:
        if mu.n != mu2.n:
            raise InvalidInputError(f"unequal atom counts: {mu.n} != {mu2.n}")
        if mu.dim != mu2.dim:
            raise InvalidInputError("dimension mismatch")
        v = (_integral(h, mu, mu) - _integral(h, mu, mu2)) - (_integral(h, mu2, mu) - _integral(h, mu2, mu2))
        values.append(v)
    if not values:
        raise InvalidInputError("no pairs given")
    return float(min(values))


def _grad(fun, v, h):
    v = np.asarray(v, dtype=float)
    g = np.empty_like(v)
    for j in range(v.size):
        e = np.zeros_like(v)
        e.flat[j] = h
        g.flat[j] = (fun(v + e) - fun(v - e)) / (2 * h)
    return g


def check_convexity(H, samples, h=1e-5):
    """Sampled strong-convexity constant of ``H`` in ``(x, alpha)``.

    ``H(x, mu, y, alpha)`` is scalar. Each sample is
    ``(x, mu, y, z, alpha, x2, alpha2)``; the returned value is the minimum of

        [H(x2, a2) - H(x, a) - <x2 - x, dx H> - <a2 - a, da H>] / |a2 - a|^2

    with gradients by central differences. ``z`` is accepted for signature
    compatibility: with a constant volatility the ``Tr(z sigma)`` part of the
    full Hamiltonian cancels in the bracket.
    """
    best = np.inf
    for s, (x, mu, y, z, a, x2, a2) in enumerate(samples):
        x, a, x2, a2, y = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (x, a, x2, a2, y))
        da = a2 - a
        nrm = float(da @ da)
        if nrm == 0.0:
            raise InvalidInputError(f"sample {s}: alpha' == alpha")
        h0 = H(x, mu, y, a)
        gx = _grad(lambda v: H(v, mu, y, a), x, h)
        ga = _grad(lambda v: H(x, mu, y, v), a, h)
        bracket = H(x2, mu, y, a2) - h0 - (x2 - x) @ gx - da @ ga
        best = min(best, float(bracket) / nrm)
    if best is np.inf:
        raise InvalidInputError("no samples given")
    return float(best)
