import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mkvmaster.errors import InvalidInputError, InvalidSpecError, OracleBlowUpError
from mkvmaster.grid import TimeGrid
from mkvmaster.lq_oracle import LqSpec, OracleField, OracleValue, oracle_field, oracle_value, solve_riccati
from mkvmaster.measure import EmpiricalMeasure

# chi_0 for the scalar default (T = 1) from the closed-form solution of
# w' = w^2 - k^2 for w = eta + chi (eta = 1), frozen here
CHI0_MFG = 0.24629698155466206  # rho = -0.5
CHI0_MKV = 0.5301726829060553  # effective coupling rho (2 - rho) = -1.25


def closed_form_w(rho_eff, s):
    k = np.sqrt(1 - rho_eff)
    w0 = 1 - rho_eff
    th = np.tanh(k * s)
    return k * (w0 + k * th) / (k + w0 * th)


def test_frozen_constants_match_closed_form():
    assert closed_form_w(-0.5, 1.0) - 1 == pytest.approx(CHI0_MFG, abs=1e-14)
    assert closed_form_w(-1.25, 1.0) - 1 == pytest.approx(CHI0_MKV, abs=1e-14)


@pytest.mark.parametrize("kind,expected", [("mfg", CHI0_MFG), ("mkv", CHI0_MKV)])
def test_scalar_default_against_closed_form(kind, expected):
    sol = solve_riccati(LqSpec(rho=-0.5), kind, TimeGrid(0.0, 1.0, 8))
    assert np.allclose(sol.eta, 1.0, atol=1e-12)
    assert sol.chi[0, 0, 0] == pytest.approx(expected, abs=1e-10)
    assert sol.chi[-1, 0, 0] == pytest.approx(0.5 if kind == "mfg" else 1.25, abs=1e-14)
    # whole trajectory
    s = 1.0 - sol.grid.nodes
    w = closed_form_w(-0.5 if kind == "mfg" else -1.25, s)
    assert np.allclose(sol.chi[:, 0, 0], w - 1, atol=1e-10)


def test_uncoupled_case_is_identity_field():
    sol = solve_riccati(LqSpec(rho=0.0), "mfg", TimeGrid(0.0, 1.0, 4))
    assert np.allclose(sol.eta, 1.0, atol=1e-13)
    assert np.allclose(sol.chi, 0.0, atol=1e-13)
    x = np.array([[0.3], [-2.0]])
    for t in (0.0, 0.37, 1.0):
        assert np.allclose(oracle_field(sol, t, x, EmpiricalMeasure([1.0, 5.0])), x, atol=1e-12)


def test_uncoupled_game_and_control_coincide():
    g = TimeGrid(0.0, 1.0, 8)
    a, b = solve_riccati(LqSpec(rho=0.0), "mfg", g), solve_riccati(LqSpec(rho=0.0), "mkv", g)
    assert np.array_equal(a.eta, b.eta) and np.array_equal(a.chi, b.chi)


def test_zero_terminal_weight_gives_tanh():
    sol = solve_riccati(LqSpec(rho=0.0, Q_G=0.0), "mfg", TimeGrid(0.0, 1.0, 4))
    assert np.allclose(sol.eta[:, 0, 0], np.tanh(1.0 - sol.grid.nodes), atol=1e-11)


def test_independent_integrator_agrees_in_two_dimensions():
    spec = LqSpec(d=2, rho=-0.3, b1=[[0.1, 0.2], [0.0, -0.1]], Q=[[1.0, 0.2], [0.2, 0.5]], R=[[1.0, 0.0], [0.0, 2.0]])
    sol = solve_riccati(spec, "mfg", TimeGrid(0.0, 1.0, 4))
    B, b1, Q = spec.B, spec.b1, spec.Q

    def rhs(t, y):
        eta, chi = y[:4].reshape(2, 2), y[4:].reshape(2, 2)
        deta = -eta @ b1 - b1.T @ eta + eta @ B @ eta - Q
        dchi = spec.rho * Q - b1.T @ chi + eta @ B @ chi - chi @ (b1 - B @ (eta + chi))
        return np.concatenate([deta.ravel(), dchi.ravel()])

    yT = np.concatenate([spec.Q_G.ravel(), (-spec.rho_G * spec.Q_G).ravel()])
    ref = solve_ivp(rhs, (1.0, 0.0), yT, rtol=1e-12, atol=1e-13).y[:, -1]
    assert np.allclose(sol.eta[0].ravel(), ref[:4], atol=1e-8)
    assert np.allclose(sol.chi[0].ravel(), ref[4:], atol=1e-8)


def test_forward_round_trip_recovers_terminal():
    sol = solve_riccati(LqSpec(rho=-0.5, Q_G=2.0), "mfg", TimeGrid(0.0, 1.0, 4))
    back = solve_ivp(lambda t, y: y**2 - 1, (0.0, 1.0), [sol.eta[0, 0, 0]], rtol=1e-12, atol=1e-13).y[0, -1]
    assert back == pytest.approx(2.0, abs=1e-8)


def test_tiny_horizon_returns_terminal_values():
    sol = solve_riccati(LqSpec(rho=-0.5, T=1e-9), "mfg", TimeGrid(0.0, 1e-9, 1))
    assert sol.eta[0, 0, 0] == pytest.approx(1.0, abs=1e-8)
    assert sol.chi[0, 0, 0] == pytest.approx(0.5, abs=1e-8)


def test_rk4_self_convergence_is_fourth_order():
    spec = LqSpec(rho=-0.5, Q_G=0.0)
    from mkvmaster.lq_oracle import _integrate, _pack, _rhs_factory

    rhs = _rhs_factory(spec, "mfg")
    yT = _pack(spec.Q_G, -spec.rho_G * spec.Q_G, spec.Q_G, -spec.rho_G * spec.Q_G, spec.rho_G**2 * spec.Q_G, 0.0)
    ends = [_integrate(rhs, yT, 0.0, 1.0, n)[0, 0] for n in (8, 16, 32, 64)]
    e1, e2 = abs(ends[1] - ends[0]), abs(ends[2] - ends[1])
    assert np.log2(e1 / e2) == pytest.approx(4.0, abs=0.3)


def test_mean_shift_moves_field_by_chi():
    sol = solve_riccati(LqSpec(rho=-0.5), "mfg", TimeGrid(0.0, 1.0, 4))
    mu = EmpiricalMeasure([0.0, 1.0, 2.0])
    x = np.array([[0.5]])
    t = 0.3
    chi = sol.coefficients(t)[1][0, 0]
    diff = oracle_field(sol, t, x, mu.shifted([0.7])) - oracle_field(sol, t, x, mu)
    assert diff[0, 0] == pytest.approx(0.7 * chi, abs=1e-12)


def test_value_terminal_and_gradient_identity():
    spec = LqSpec(rho=-0.5)
    sol = solve_riccati(spec, "mfg", TimeGrid(0.0, 1.0, 4))
    mu = EmpiricalMeasure([0.2, 1.4])
    x = np.array([[0.3], [-1.0]])
    G = 0.5 * (x[:, 0] - spec.rho * 0.8) ** 2
    assert np.allclose(oracle_value(sol, spec, 1.0, x, mu), G, atol=1e-13)
    V, U = OracleValue(sol, spec), OracleField(sol)
    h = 1e-5
    for t in (0.0, 0.5):
        dV = (V.value(t, x + h, mu) - V.value(t, x - h, mu)) / (2 * h)
        assert np.allclose(dV, U.value(t, x, mu), atol=1e-8)


def test_expensive_control_keeps_terminal_cost():
    spec = LqSpec(rho=0.0, Q=0.0, R=1e4, sigma=0.0)
    sol = solve_riccati(spec, "mfg", TimeGrid(0.0, 1.0, 4))
    x = np.array([[1.5]])
    assert oracle_value(sol, spec, 0.0, x, EmpiricalMeasure([0.0]))[0] == pytest.approx(0.5 * 1.5**2, rel=2e-4)


def test_blow_up_is_reported():
    with pytest.raises(OracleBlowUpError):
        solve_riccati(LqSpec(rho=3.0, T=10.0), "mfg")


def test_csv_export():
    sol = solve_riccati(LqSpec(rho=-0.5), "mfg", TimeGrid(0.0, 1.0, 2))
    lines = sol.to_csv().split("\r\n")
    assert lines[0] == "t,eta11,chi11"
    assert len([ln for ln in lines if ln]) == 4


@pytest.mark.parametrize(
    "kwargs", [{"R": -1.0}, {"Q": -1.0}, {"T": 0.0}, {"d": 0}, {"R": [[1.0, 2.0], [0.0, 1.0]], "d": 2}]
)
def test_invalid_specs(kwargs):
    with pytest.raises(InvalidSpecError):
        LqSpec(**kwargs)


def test_bad_kind_and_time():
    with pytest.raises(InvalidInputError):
        solve_riccati(LqSpec(), "nash")
    sol = solve_riccati(LqSpec(), "mfg")
    with pytest.raises(InvalidInputError):
        sol.coefficients(2.0)
