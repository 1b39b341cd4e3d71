import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sarbnn import bnn, uncertainty
from oracles import mutual_information_loop


def random_probs(rng, t, c):
    z = rng.normal(scale=rng.uniform(0.1, 4.0), size=(t, c))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


prob_rows = st.tuples(st.integers(1, 16), st.integers(2, 10)).flatmap(
    lambda tc: arrays(np.float64, tc, elements=st.floats(1e-6, 1.0))).map(
    lambda a: a / a.sum(axis=1, keepdims=True))


def test_examples():
    assert uncertainty.mutual_information(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(math.log(2), abs=1e-12)
    rows = np.array([[0.8, 0.2], [0.6, 0.4]])
    assert uncertainty.mutual_information(rows) == pytest.approx(mutual_information_loop(rows), abs=1e-12)
    assert uncertainty.mutual_information(np.tile([0.2, 0.3, 0.5], (7, 1))) == pytest.approx(0.0, abs=1e-9)


def test_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        rows = random_probs(rng, int(rng.integers(1, 17)), int(rng.integers(2, 11)))
        assert abs(uncertainty.mutual_information(rows) - max(0.0, mutual_information_loop(rows))) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(prob_rows)
def test_bounds(rows):
    mi = uncertainty.mutual_information(rows)
    mean = rows.mean(axis=0)
    h_mean = -np.sum(mean * np.log(mean + 1e-12))
    assert -1e-9 <= mi <= min(math.log(rows.shape[1]), h_mean) + 1e-9


@settings(max_examples=100, deadline=None)
@given(prob_rows, st.randoms(use_true_random=False))
def test_permutation_invariance(rows, rnd):
    rperm = list(range(rows.shape[0]))
    cperm = list(range(rows.shape[1]))
    rnd.shuffle(rperm)
    rnd.shuffle(cperm)
    base = uncertainty.mutual_information(rows)
    assert uncertainty.mutual_information(rows[rperm]) == pytest.approx(base, abs=1e-12)
    assert uncertainty.mutual_information(rows[:, cperm]) == pytest.approx(base, abs=1e-12)


def test_vectorised_over_leading_axes():
    rng = np.random.default_rng(1)
    stack = np.stack([random_probs(rng, 5, 4) for _ in range(6)])
    np.testing.assert_allclose(uncertainty.mutual_information(stack),
                               [uncertainty.mutual_information(s) for s in stack], atol=1e-15)


def test_empty_matrix_is_an_error():
    with pytest.raises(ValueError):
        uncertainty.mutual_information(np.zeros((0, 3)))


def test_entropy_of_one_hot_is_finite():
    assert uncertainty.entropy(np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-10)


@pytest.fixture(scope="module")
def model():
    arch = bnn.ArchitectureSpec.parse("C(4,3) - ReLU - MP(2,2) - FC(5)", (1, 8, 8), 5).validate()
    return bnn.build_model(arch, seed=2, rho_init=-1.5)


def test_predict_summary_invariants(model):
    x = np.random.default_rng(0).uniform(size=(1, 8, 8)).astype(np.float32)
    s = uncertainty.predict(model, x, t=12, seed=5)
    assert s.t == 12 and s.sample_probs.shape == (12, 5)
    np.testing.assert_allclose(s.sample_probs.sum(axis=1), 1.0, atol=1e-5)
    assert np.array_equal(s.mean_probs, s.sample_probs.mean(axis=0))
    assert 0 <= s.mi <= math.log(5) + 1e-9
    assert s.predicted == int(np.argmax(s.mean_probs))


def test_single_sample_has_zero_mi(model):
    x = np.random.default_rng(0).uniform(size=(1, 8, 8))
    s = uncertainty.predict(model, x, t=1, seed=0)
    assert s.mi == 0.0
    assert np.array_equal(s.mean_probs, s.sample_probs[0])


def test_collapsed_posterior_has_zero_mi(model):
    frozen = model.copy()
    for post in frozen.posteriors():
        post.rho = np.full_like(post.rho, -80.0)
    x = np.random.default_rng(3).uniform(size=(4, 1, 8, 8))
    assert np.all(uncertainty.predict_batch(frozen, x, t=8, seed=1).mi <= 1e-9)


def test_seeded_and_draw_i_uses_seed_plus_i(model):
    x = np.random.default_rng(0).uniform(size=(3, 1, 8, 8))
    a = uncertainty.predict_batch(model, x, t=6, seed=10)
    b = uncertainty.predict_batch(model, x, t=6, seed=10)
    assert np.array_equal(a.sample_probs, b.sample_probs)
    shifted = uncertainty.predict_batch(model, x, t=5, seed=11)
    assert np.array_equal(a.sample_probs[:, 1:], shifted.sample_probs)
    single = uncertainty.predict(model, x[1], t=6, seed=10)
    np.testing.assert_allclose(single.sample_probs, a.sample_probs[1], rtol=1e-6)


def test_ties_pick_lowest_class():
    bp = uncertainty.BatchPrediction(np.full((1, 3, 4), 0.25), seed=0)
    assert bp.predicted.tolist() == [0]


def test_shape_errors(model):
    with pytest.raises(ValueError):
        uncertainty.predict(model, np.zeros((2, 1, 8, 8)))
    with pytest.raises(ValueError):
        uncertainty.predict_batch(model, np.zeros((2, 1, 9, 9)), t=2)
    with pytest.raises(ValueError):
        uncertainty.predict(model, np.zeros((1, 8, 8)), t=0)
