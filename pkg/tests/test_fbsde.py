import json

import numpy as np
import pytest

from conftest import LQ_INIT, LQ_PARAMS
from mkvmaster.errors import BlowUpError, ConvergenceError, IllConditionedBasisError, InvalidInputError, InvalidSpecError
from mkvmaster.fbsde import (
    InitialLawSpec,
    PolynomialBasis,
    SolverParams,
    decoupling_residual,
    flow_consistency,
    solve_long_horizon,
    solve_small_time,
    weak_lipschitz_estimate,
)
from mkvmaster.grid import TimeGrid
from mkvmaster.lq_oracle import LqSpec, oracle_field, solve_riccati
from mkvmaster.scenario import build_scenario


def small(**kw):
    base = dict(n_particles=256, n_steps=8, seed=1)
    base.update(kw)
    return SolverParams(**base)


def oracle_error(ens, fld, sol):
    worst = 0.0
    for k in range(fld.grid.K + 1):
        x, mu = ens.X[:, k], ens.measure(k)
        diff = np.abs(fld.value_at(k, x, mu) - oracle_field(sol, fld.grid.time(k), x, mu))
        worst = max(worst, float(np.max(diff[:, 0] / (1 + np.abs(x[:, 0])))))
    return worst


@pytest.mark.parametrize(
    "kw", [{"n_particles": 1}, {"n_steps": 0}, {"basis_degree": -1}, {"damping": 0.0}, {"tol_law": 0.0},
           {"mean_regressor": True, "replicas": 1}, {"delta_min": -1.0}, {"picard_max": 0}]
)
def test_solver_params_validation(kw):
    with pytest.raises(InvalidSpecError):
        SolverParams(**kw)


def test_replica_defaults():
    assert SolverParams().n_replicas(2) == 1
    assert SolverParams(mean_regressor=True).n_replicas(2) == 5


def test_initial_law_sampling():
    a = InitialLawSpec(mean=1.0, std=0.5).sample(1000, 1, 3)
    assert np.array_equal(a, InitialLawSpec(mean=1.0, std=0.5).sample(1000, 1, 3))
    assert abs(a.mean() - 1.0) < 0.05
    # specs of one kind sharing a seed are coupled atom by atom
    b = InitialLawSpec(mean=2.0, std=0.5).sample(1000, 1, 3)
    assert np.allclose(b - a, 1.0)
    u = InitialLawSpec(kind="uniform", low=-1.0, high=2.0).sample(500, 2, 0)
    assert u.min() >= -1.0 and u.max() <= 2.0
    with pytest.raises(InvalidInputError):
        InitialLawSpec(kind="atoms", atoms=[1.0, 2.0]).sample(3, 1, 0)
    with pytest.raises(InvalidSpecError):
        InitialLawSpec(kind="cauchy")


def test_basis_size_and_derivatives():
    basis = PolynomialBasis(2, 2)
    assert basis.size == 6
    assert PolynomialBasis(2, 1, mean_features=True).size == 5
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2))
    centre, scale = np.array([0.1, -0.2]), np.array([1.5, 0.7])
    grad = basis.gradient(x, centre, scale)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (basis.features(x + e, centre, scale) - basis.features(x - e, centre, scale)) / (2 * h)
        assert np.allclose(grad[:, :, j], fd, atol=1e-7)
    hess = basis.hessian(x, centre, scale)
    assert hess.shape == (4, 6, 2, 2)
    assert np.allclose(hess, np.swapaxes(hess, 2, 3))


def test_constant_terminal_is_exact():
    c = build_scenario("constant_terminal", {"value": 2.5})
    ens, fld = solve_small_time(c, LQ_INIT, TimeGrid(0.0, 1.0, 8), small())
    assert np.allclose(ens.Y, 2.5, atol=1e-12)
    assert np.allclose(ens.Z, 0.0, atol=1e-12)
    assert len(fld.diagnostics["picard_gaps"]) == 1
    assert fld.diagnostics["decoupling_residual"] < 1e-12


def test_decoupled_linear_field_is_identity():
    c = build_scenario("decoupled_linear")
    ens, fld = solve_small_time(c, LQ_INIT, TimeGrid(0.0, 1.0, 8), small())
    x = np.linspace(-1, 3, 7)[:, None]
    for t in (0.0, 0.55, 1.0):
        assert np.allclose(fld.value(t, x), x, atol=1e-10)
    assert np.allclose(ens.Y, ens.X, atol=1e-10)
    assert np.allclose(ens.Z, 1.0, atol=1e-10)


def test_heat_field_tracks_remaining_time():
    c = build_scenario("heat_quadratic")
    ens, fld = solve_small_time(c, LQ_INIT, TimeGrid(0.0, 1.0, 16), small(n_particles=4096, n_steps=16))
    x = np.array([[0.5], [1.0], [1.5]])
    assert np.allclose(fld.value(0.0, x), x**2 + 1.0, atol=0.1)
    assert fld.diagnostics["decoupling_residual"] < 2 * fld.diagnostics["fit_diagnostic"]


def test_terminal_condition_and_determinism():
    c = build_scenario("lq_mfg", LQ_PARAMS)
    grid = TimeGrid(0.0, 1.0, 8)
    p = small(basis_degree=1, mean_regressor=True)
    ens, fld = solve_small_time(c, LQ_INIT, grid, p)
    g = c.g(ens.X[:, -1], ens.measure(grid.K))
    assert np.array_equal(ens.Y[:, -1], g)
    ens2, fld2 = solve_small_time(c, LQ_INIT, grid, p)
    assert np.array_equal(ens.X, ens2.X) and np.array_equal(ens.Y, ens2.Y)
    assert np.array_equal(fld.coef, fld2.coef)
    assert fld.to_csv("abc") == fld2.to_csv("abc")


def test_lq_game_matches_oracle(lq_mfg_small):
    c, grid, params, ens, fld, sol = lq_mfg_small
    assert oracle_error(ens, fld, sol) < 1e-2
    gaps = fld.diagnostics["picard_gaps"]
    assert gaps[-1] < params.tol_law
    assert fld.diagnostics["decoupling_residual"] < 2 * fld.diagnostics["fit_diagnostic"]
    assert len(fld.diagnostics["z_consistency"]) == grid.K + 1


def test_z_consistency_shrinks_under_refinement():
    c = build_scenario("lq_mfg", LQ_PARAMS)
    rms = []
    for n, K in ((1024, 16), (4096, 32)):
        p = SolverParams(n_particles=n, n_steps=K, basis_degree=1, mean_regressor=True, seed=3)
        _, fld = solve_small_time(c, LQ_INIT, TimeGrid(0.0, 1.0, K), p)
        rms.append(np.sqrt(np.mean(np.square(fld.diagnostics["z_consistency"]))))
    assert rms[1] < rms[0]


def test_field_exports(lq_mfg_small):
    _, grid, _, ens, fld, _ = lq_mfg_small
    lines = fld.to_csv("h1").split("\r\n")
    assert lines[0].startswith("step,t,") and lines[0].endswith(",config_hash")
    assert len([ln for ln in lines if ln]) == grid.K + 2
    meta = json.loads(fld.to_json("h1"))
    assert meta["config_hash"] == "h1"
    assert fld.diagnostics["outside_contraction_regime"] is False
    head = ens.to_csv().split("\r\n")[0]
    assert head == "particle,step,X1,Y1,Z1_1"


def test_convergence_failure_carries_gaps():
    c = build_scenario("lq_mfg", LQ_PARAMS)
    with pytest.raises(ConvergenceError) as info:
        solve_small_time(c, LQ_INIT, TimeGrid(0.0, 1.0, 8), small(picard_max=2, tol_law=1e-12, basis_degree=1))
    assert len(info.value.gaps) == 2


def test_degenerate_initial_law_is_ill_conditioned():
    # all atoms equal: the quadratic design matrix has rank one
    frozen_start = InitialLawSpec(mean=1.0, std=0.0)
    with pytest.raises(IllConditionedBasisError):
        solve_small_time(build_scenario("frozen"), frozen_start, TimeGrid(0.0, 1.0, 4), small(basis_degree=2))


def test_single_block_is_bitwise_small_time():
    c = build_scenario("lq_mfg", LQ_PARAMS)
    p = small(basis_degree=1, mean_regressor=True)
    a_ens, a_fld = solve_small_time(c, LQ_INIT, TimeGrid(0.0, 1.0, 8), p)
    b_ens, b_fld = solve_long_horizon(c, LQ_INIT, 0.0, 1.0, p)
    assert np.array_equal(a_ens.Y, b_ens.Y)
    assert np.array_equal(a_fld.coef, b_fld.coef)


def test_constant_terminal_over_blocks():
    c = build_scenario("constant_terminal", {"value": -1.0})
    ens, fld = solve_long_horizon(c, LQ_INIT, 0.0, 4.0, small(n_steps=32, block_length=1.0))
    assert fld.diagnostics["block_steps"] == 8
    assert np.allclose(ens.Y, -1.0, atol=1e-10)


def test_long_horizon_game_against_oracle():
    lq = LqSpec(rho=-0.5, T=3.0)
    c = build_scenario("lq_mfg", {"rho": -0.5, "T": 3.0})
    p = SolverParams(n_particles=2048, n_steps=96, basis_degree=1, mean_regressor=True, block_length=1.0, seed=4)
    ens, fld = solve_long_horizon(c, LQ_INIT, 0.0, 3.0, p)
    assert fld.diagnostics["block_steps"] == 32
    assert oracle_error(ens, fld, solve_riccati(lq, "mfg", fld.grid)) < 2e-2


def test_block_underflow_raises_blow_up():
    c = build_scenario("lq_mfg", {"rho": 0.9, "Q": 10.0, "Q_G": 10.0, "T": 50.0})
    p = SolverParams(n_particles=256, n_steps=64, basis_degree=1, picard_max=5, delta_min=40.0, seed=1)
    with pytest.raises(BlowUpError):
        solve_long_horizon(c, LQ_INIT, 0.0, 50.0, p)


def test_decoupling_residual_grid_mismatch(lq_mfg_small):
    _, _, _, ens, _, _ = lq_mfg_small
    c = build_scenario("decoupled_linear")
    _, other = solve_small_time(c, LQ_INIT, TimeGrid(0.0, 1.0, 4), small(n_steps=4))
    with pytest.raises(InvalidInputError):
        decoupling_residual(ens, other)


def test_flow_consistency_trivial_cases():
    grid = TimeGrid(0.0, 1.0, 8)
    frozen = build_scenario("frozen")
    assert flow_consistency(frozen, LQ_INIT, grid, small(basis_degree=1), 0.5) < 1e-12
    const = build_scenario("constant_terminal", {"value": 3.0})
    assert flow_consistency(const, LQ_INIT, grid, small(), 0.5) < 1e-12


def test_flow_consistency_lq(lq_mfg_small):
    c, grid, params, _, fld, _ = lq_mfg_small
    assert flow_consistency(c, LQ_INIT, grid, params, 0.5) < 2e-2


def test_weak_lipschitz_examples():
    grid = TimeGrid(0.0, 1.0, 8)
    pairs = [(LQ_INIT, InitialLawSpec(mean=1.5, std=0.5))]
    const = build_scenario("constant_terminal")
    assert weak_lipschitz_estimate(const, grid, small(), pairs) < 1e-12
    lin = build_scenario("decoupled_linear")
    assert weak_lipschitz_estimate(lin, grid, small(basis_degree=1), pairs) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(InvalidInputError):
        weak_lipschitz_estimate(lin, grid, small(), [(LQ_INIT, LQ_INIT)])
