import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperlabel import oracle
from hyperlabel.errors import EnumerationCapError, NoValidLabelingError, ValidSetTooSparseError

from conftest import label_matrices, naive_hstar

DIAGONAL = np.array([[1, 1, 1], [-1, -1, -1]])


def test_single_valid_labeling():
    r = oracle.exact_hstar(DIAGONAL)
    np.testing.assert_array_equal(r.estimate, [1.0, -1.0])
    assert r.valid_count == 1 and r.method == "exact"


def test_row_swap_flips_estimate():
    np.testing.assert_array_equal(oracle.exact_hstar(DIAGONAL[::-1]).estimate, [-1.0, 1.0])


def test_cap_and_empty_set_errors():
    with pytest.raises(EnumerationCapError):
        oracle.exact_hstar(np.ones((21, 2), dtype=int))
    with pytest.raises(NoValidLabelingError):
        oracle.exact_hstar(np.zeros((3, 3), dtype=int))
    assert oracle.exact_hstar(np.ones((3, 1), dtype=int) * [[1], [-1], [1]], cap=3).valid_count > 0


@settings(max_examples=40)
@given(label_matrices(max_n=9, max_m=5, min_n=2))
def test_exact_matches_naive_enumeration(X):
    total, count = naive_hstar(X)
    if count == 0:
        with pytest.raises(NoValidLabelingError):
            oracle.exact_hstar(X)
        return
    r = oracle.exact_hstar(X)
    assert r.valid_count == count
    np.testing.assert_array_equal(r.estimate, np.array(total) / count)


def test_high_block_path_matches_naive(rng):
    # n above the tabulated block exercises the Gray-code walk
    for _ in range(3):
        X = rng.integers(-1, 2, size=(12, 3))
        total, count = naive_hstar(X)
        if count:
            np.testing.assert_array_equal(oracle.exact_hstar(X).estimate, np.array(total) / count)


@given(label_matrices(max_n=8, max_m=5, min_n=2), st.randoms(use_true_random=False))
def test_exact_symmetries(X, r):
    try:
        base = oracle.exact_hstar(X).estimate
    except NoValidLabelingError:
        return
    rows = list(range(X.shape[0]))
    cols = list(range(X.shape[1]))
    r.shuffle(rows)
    r.shuffle(cols)
    np.testing.assert_array_equal(oracle.exact_hstar(X[:, cols]).estimate, base)
    np.testing.assert_array_equal(oracle.exact_hstar(X[rows]).estimate, base[rows])
    np.testing.assert_array_equal(oracle.exact_hstar(-X).estimate, -base)


def test_mc_is_seeded_and_close_to_exact(rng):
    X = rng.integers(-1, 2, size=(10, 5))
    while True:
        try:
            exact = oracle.exact_hstar(X)
            break
        except NoValidLabelingError:
            X = rng.integers(-1, 2, size=(10, 5))
    a = oracle.mc_hstar(X, 20000, seed=1)
    b = oracle.mc_hstar(X, 20000, seed=1)
    np.testing.assert_array_equal(a.estimate, b.estimate)
    assert a.method == "monte_carlo" and a.valid_count == 20000 and a.samples_drawn >= 20000
    # 5 standard errors of a +/-1 mean
    assert np.max(np.abs(a.estimate - exact.estimate)) < 5 / np.sqrt(20000)


def test_mc_singleton_set_is_exact():
    np.testing.assert_array_equal(oracle.mc_hstar(DIAGONAL, 50, seed=0).estimate, [1.0, -1.0])


def test_mc_too_sparse():
    with pytest.raises(ValidSetTooSparseError):
        oracle.mc_hstar(np.zeros((4, 2), dtype=int), 1, max_draws=500)


def test_result_json():
    doc = json.loads(oracle.exact_hstar(DIAGONAL).to_json())
    assert doc == {"estimate": [1.0, -1.0], "valid_count": 1, "method": "exact", "samples_drawn": 0}


def test_closed_form_probabilities():
    assert oracle.appendix_probability(7) == 0.25
    assert oracle.appendix_probability(2) == 0.125
    terms = [oracle.appendix_probability(m) for m in range(2, 61)]
    # the quoted 0.232 weights each of the 59 shapes by 1/(60 - 2)
    assert sum(terms) / 58 == pytest.approx(0.232, abs=5e-4)
    assert np.mean(terms) == pytest.approx(0.2277, abs=5e-4)


def test_valid_pair_probability_small_n_agrees_with_enumeration():
    # n=2, m=1: only X=[[1],[-1]], y=(1,-1) and its negation are valid -> 2 / (9 * 4)
    p = oracle.valid_pair_probability(2, 1, trials=200000, seed=0)
    assert abs(p - 2 / 36) < 4 * np.sqrt((2 / 36) * (1 - 2 / 36) / 200000)


def test_ce_minimiser_singleton():
    got, hstar = oracle.ce_minimizer_check(DIAGONAL, 10, seed=0)
    np.testing.assert_array_equal(got, [1.0, -1.0])
    np.testing.assert_array_equal(hstar, [1.0, -1.0])


def test_ce_minimiser_is_in_range_and_near_sample_mean(rng):
    X = np.array([[1, 1, 0], [-1, 0, -1], [1, -1, 1], [0, -1, -1], [1, 1, 1]])
    got, hstar = oracle.ce_minimizer_check(X, 4000, seed=3)
    assert np.all(np.abs(got) <= 1)
    assert np.max(np.abs(got - hstar)) < 0.1
