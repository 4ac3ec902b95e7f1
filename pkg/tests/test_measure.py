import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mkvmaster.errors import InvalidInputError
from mkvmaster.measure import EmpiricalMeasure, coupled_distance, mean, second_moment, std, w2_distance

coord = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def measure_pairs(draw, max_n=6, max_d=3):
    n = draw(st.integers(1, max_n))
    d = draw(st.integers(1, max_d))
    a = draw(arrays(float, (n, d), elements=coord))
    b = draw(arrays(float, (n, d), elements=coord))
    return EmpiricalMeasure(a), EmpiricalMeasure(b)


def brute_w2(mu, nu):
    x, y = mu.atoms, nu.atoms
    best = min(np.sum((x - y[list(p)]) ** 2) for p in itertools.permutations(range(mu.n)))
    return np.sqrt(best / mu.n)


def test_construction_promotes_scalars_and_freezes():
    mu = EmpiricalMeasure([1.0, 2.0, 3.0])
    assert mu.atoms.shape == (3, 1)
    assert mu.n == 3 and mu.dim == 1
    with pytest.raises(ValueError):
        mu.atoms[0, 0] = 5.0


@pytest.mark.parametrize("bad", [[], [[np.nan]], [[1.0], [np.inf]], np.zeros((2, 2, 2))])
def test_construction_rejects_bad_atoms(bad):
    with pytest.raises(InvalidInputError):
        EmpiricalMeasure(bad)


def test_w2_of_identical_measures_is_zero():
    mu = EmpiricalMeasure([[0.0, 1.0], [2.0, -1.0]])
    assert w2_distance(mu, mu) == 0.0


def test_w2_of_shift_equals_shift_length():
    mu = EmpiricalMeasure(np.arange(12.0).reshape(4, 3))
    a = np.array([0.3, -1.2, 2.0])
    assert w2_distance(mu, mu.shifted(a)) == pytest.approx(np.linalg.norm(a), abs=1e-12)


def test_w2_two_point_example():
    # swapping the pairing is cheaper: optimal cost (0 + 0) / 2
    mu = EmpiricalMeasure([[0.0, 0.0], [1.0, 1.0]])
    nu = EmpiricalMeasure([[1.0, 1.0], [0.0, 0.0]])
    assert w2_distance(mu, nu) == 0.0
    assert coupled_distance(mu, nu) == pytest.approx(np.sqrt(2.0))


def test_w2_rejects_mismatched_pairs():
    with pytest.raises(InvalidInputError):
        w2_distance(EmpiricalMeasure([1.0, 2.0]), EmpiricalMeasure([1.0]))
    with pytest.raises(InvalidInputError):
        w2_distance(EmpiricalMeasure([[1.0, 2.0]]), EmpiricalMeasure([1.0]))


@settings(max_examples=150, deadline=None)
@given(measure_pairs())
def test_w2_matches_exhaustive_search(pair):
    mu, nu = pair
    assert w2_distance(mu, nu) == pytest.approx(brute_w2(mu, nu), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(measure_pairs())
def test_w2_symmetric_and_bounded_by_coupling(pair):
    mu, nu = pair
    assert w2_distance(mu, nu) == pytest.approx(w2_distance(nu, mu), abs=1e-12)
    assert w2_distance(mu, nu) <= coupled_distance(mu, nu) + 1e-12


@settings(max_examples=100, deadline=None)
@given(measure_pairs(), st.data())
def test_w2_triangle_inequality(pair, data):
    mu, nu = pair
    third = data.draw(arrays(float, mu.atoms.shape, elements=coord))
    rho = EmpiricalMeasure(third)
    assert w2_distance(mu, nu) <= w2_distance(mu, rho) + w2_distance(rho, nu) + 1e-9


@settings(max_examples=100, deadline=None)
@given(measure_pairs(), st.data())
def test_w2_translation_and_permutation_invariant(pair, data):
    mu, nu = pair
    a = np.array(data.draw(st.lists(coord, min_size=mu.dim, max_size=mu.dim)))
    assert w2_distance(mu.shifted(a), nu.shifted(a)) == pytest.approx(w2_distance(mu, nu), abs=1e-8)
    perm = data.draw(st.permutations(range(mu.n)))
    shuffled = EmpiricalMeasure(mu.atoms[list(perm)])
    assert w2_distance(shuffled, nu) == pytest.approx(w2_distance(mu, nu), abs=1e-9)


def test_moments():
    mu = EmpiricalMeasure([[1.0, 0.0], [3.0, 2.0]])
    assert np.allclose(mean(mu), [2.0, 1.0])
    assert second_moment(mu) == pytest.approx((1 + 9 + 4) / 2)
    assert std(mu) == pytest.approx(np.sqrt(2.0))


def test_json_and_csv_round_trip():
    mu = EmpiricalMeasure(np.random.default_rng(0).normal(size=(5, 2)))
    assert EmpiricalMeasure.from_json(mu.to_json()) == mu
    text = mu.to_csv()
    assert text.startswith("x1,x2\r\n")
    assert EmpiricalMeasure.from_csv(text) == mu


def test_with_atom_and_marginal():
    mu = EmpiricalMeasure([[0.0, 1.0], [2.0, 3.0]])
    nu = mu.with_atom(1, [5.0, 5.0])
    assert np.array_equal(nu.atoms, [[0.0, 1.0], [5.0, 5.0]])
    assert np.array_equal(mu.atoms[1], [2.0, 3.0])
    assert np.array_equal(mu.marginal([1]).atoms, [[1.0], [3.0]])
