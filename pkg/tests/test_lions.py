import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkvmaster.errors import InvalidInputError, NumericDomainError, OffSupportError
from mkvmaster.grid import TimeGrid
from mkvmaster.lions import (
    MeasureFunctional,
    MomentFunctional,
    ParticleFlow,
    chain_rule_residual,
    full_ito_residual,
    lions_derivative,
    lions_second_diag,
    simulate_flow,
)
from mkvmaster.measure import EmpiricalMeasure

linear = MomentFunctional(lambda x: x[:, 0], lambda m: m[..., 0], "mean")
squared_mean = MomentFunctional(lambda x: x[:, 0], lambda m: m[..., 0] ** 2, "squared mean")
second_moment = MomentFunctional(lambda x: (x**2).sum(axis=1), lambda m: m[..., 0], "second moment")
l2_norm = MomentFunctional(lambda x: (x**2).sum(axis=1), lambda m: np.sqrt(m[..., 0]), "L2 norm")


def gaussian_measure(n=64, d=1, seed=0, loc=0.5):
    return EmpiricalMeasure(np.random.default_rng(seed).normal(loc=loc, size=(n, d)))


@pytest.mark.parametrize("h", [1e-6, 1e-3, 0.5])
def test_linear_functional_has_unit_derivative(h):
    est = lions_derivative(linear, gaussian_measure(), h)
    assert np.allclose(est.values, 1.0, atol=1e-9)


def test_norm_derivative_is_normalised_atom():
    mu = gaussian_measure(d=2)
    est = lions_derivative(l2_norm, mu)
    norm = np.sqrt(np.mean((mu.atoms**2).sum(axis=1)))
    assert np.allclose(est.values, mu.atoms / norm, rtol=1e-6, atol=1e-8)


def test_squared_mean_derivative_is_twice_the_mean():
    mu = gaussian_measure()
    est = lions_derivative(squared_mean, mu)
    assert np.allclose(est.values, 2 * mu.atoms.mean(), rtol=1e-6)


def test_generic_functional_agrees_with_moment_fast_path():
    mu = gaussian_measure(n=16, d=2, seed=3)
    slow = MeasureFunctional(lambda m: float(np.sqrt(np.mean((m.atoms**2).sum(axis=1)))))
    assert np.allclose(lions_derivative(slow, mu).values, lions_derivative(l2_norm, mu).values, atol=1e-7)


def test_second_diag_examples():
    mu = gaussian_measure(n=50, d=2)
    assert np.allclose(lions_second_diag(second_moment, mu, 1e-3).values, 2 * np.eye(2), atol=1e-6)
    assert np.allclose(lions_second_diag(linear, mu, 1e-3).values, 0.0, atol=1e-6)
    # the (1/N) second-measure-derivative bias of the estimator
    mu1 = gaussian_measure(n=50)
    assert np.allclose(lions_second_diag(squared_mean, mu1, 1e-3).values, 2 / 50, rtol=1e-4)


def test_estimate_shapes_and_lookup():
    mu = gaussian_measure(n=8, d=2)
    est = lions_derivative(second_moment, mu)
    assert est.values.shape == (8, 2) and est.order == 1 and est.step > 0
    assert np.allclose(est.at(mu.atoms[3]), 2 * mu.atoms[3], rtol=1e-6)
    with pytest.raises(OffSupportError):
        est.at(mu.atoms[3] + 1e-3)


def test_non_finite_functional_reports_atom():
    mu = EmpiricalMeasure([[3.0], [4.0], [2.001]])
    bad = MomentFunctional(lambda x: np.sqrt(x[:, 0] - 2.0), lambda m: m[..., 0], "root")
    with pytest.raises(NumericDomainError) as info, np.errstate(invalid="ignore"):
        lions_derivative(bad, mu, 0.01)
    assert info.value.index == 2


def test_rejects_bad_step():
    with pytest.raises(InvalidInputError):
        lions_derivative(linear, gaussian_measure(), -1.0)


def test_halving_step_changes_derivative_at_second_order():
    mu = gaussian_measure(n=32, seed=5)
    cubic = MomentFunctional(lambda x: x[:, 0] ** 3, lambda m: m[..., 0], "third moment")
    exact = 3 * mu.atoms**2
    e1 = np.abs(lions_derivative(cubic, mu, 1e-2).values - exact).max()
    e2 = np.abs(lions_derivative(cubic, mu, 5e-3).values - exact).max()
    assert e2 == pytest.approx(e1 / 4, rel=0.05)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 3))
def test_permuting_atoms_permutes_derivative(seed, n, d):
    rng = np.random.default_rng(seed)
    mu = EmpiricalMeasure(rng.normal(size=(n, d)))
    perm = rng.permutation(n)
    a = lions_derivative(l2_norm, mu).values
    b = lions_derivative(l2_norm, EmpiricalMeasure(mu.atoms[perm])).values
    assert np.allclose(a[perm], b, rtol=1e-8, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-6, 1.0))
def test_linear_functionals_exact_for_any_step(seed, h):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=3)
    U = MomentFunctional(lambda x: x @ c, lambda m: m[..., 0], "linear")
    mu = EmpiricalMeasure(rng.normal(size=(7, 3)))
    assert np.allclose(lions_derivative(U, mu, h).values, c, rtol=1e-7, atol=1e-7 / h)


def _brownian(n, K, d=1, seed=0, x0=None, matched=False):
    grid = TimeGrid(0.0, 1.0, K)
    x0 = np.zeros((n, d)) if x0 is None else x0
    eye = np.eye(d)
    return simulate_flow(x0, lambda t, X: np.zeros_like(X), lambda t, X: np.broadcast_to(eye, X.shape + (d,)), grid, seed, matched)


def test_chain_rule_constant_functional_is_exact():
    flow = _brownian(256, 8)
    U = MeasureFunctional(lambda m: 3.0)
    assert chain_rule_residual(U, flow) == 0.0


def test_chain_rule_brownian_quadratic():
    flow = _brownian(4096, 64, d=2, seed=2)
    assert chain_rule_residual(second_moment, flow) < 0.1


def test_ou_second_moment_matches_closed_form():
    grid = TimeGrid(0.0, 1.0, 200)
    eye = np.eye(1)
    flow = simulate_flow(
        np.zeros((4096, 1)), lambda t, X: -X, lambda t, X: np.broadcast_to(eye, X.shape + (1,)), grid, 4, True
    )
    m2 = float(np.mean(flow.X[:, -1, 0] ** 2))
    assert abs(m2 - 0.5 * (1 - np.exp(-2))) < 0.02
    assert chain_rule_residual(second_moment, flow) < 0.05


def test_flow_shape_validation():
    flow = _brownian(8, 4)
    with pytest.raises(InvalidInputError):
        ParticleFlow(flow.grid, flow.X[:, :3], flow.drift, flow.diffusion)
    with pytest.raises(InvalidInputError):
        chain_rule_residual(linear, "not a flow")


def test_full_ito_time_only():
    # only the left-point quadrature error in time remains, O(dt)
    coarse = full_ito_residual(lambda t, x, mu: np.sin(t), _brownian(4, 20), observed_path_index=[0])
    fine = full_ito_residual(lambda t, x, mu: np.sin(t), _brownian(4, 200), observed_path_index=[0])
    assert fine < 2e-3
    assert fine == pytest.approx(coarse / 10, rel=0.1)


def test_full_ito_martingale_state():
    flow = _brownian(64, 16, seed=3, matched=True)
    assert full_ito_residual(lambda t, x, mu: x[0], flow) < 1e-8


def test_full_ito_interacting_product():
    # V = x m(mu) under dX = dW: the N-particle expectation grows by t/N
    n = 400
    flow = _brownian(n, 8, seed=6, x0=np.full((n, 1), 0.7))
    V = lambda t, x, mu: x[0] * mu.atoms.mean()  # noqa: E731
    res = full_ito_residual(V, flow, observed_path_index=np.arange(0, n, 8))
    assert res < 0.05
