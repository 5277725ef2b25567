import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from wdnfault import neural
from wdnfault.detector import LSTMVAEDetector, ThresholdState, classify, score, update_threshold
from wdnfault.exceptions import EmptyTrainingSet


@pytest.fixture(scope="module")
def fitted():
    t = np.arange(600)
    x = np.sin(2 * np.pi * t / 48) + np.random.default_rng(0).normal(0, 0.05, 600)
    return LSTMVAEDetector(epochs=15, random_state=0).fit(x), x


def test_classify_examples():
    assert classify(2.0, 1.0, [2.0] * 9) == 1
    assert classify(2.0, 1.0, [0.0] * 9) == 0  # isolated spike: mean 0.2
    assert classify(0.5, 1.0, [5.0] * 9) == 0  # current score below theta
    assert classify(2.0, 1.0) == 1  # no history: the mean is the score itself
    # only the last span-1 previous scores count
    assert classify(2.0, 1.0, [100.0] + [0.9] * 9) == 1
    assert classify(1.1, 1.0, [100.0] + [0.0] * 9) == 0
    assert classify(1.0, 1.0, [1.0] * 9) == 0  # strict inequality
    assert classify(2.0, ThresholdState(1.0), [0.0] * 9, rule="pointwise") == 1
    assert classify(0.5, 1.0, [5.0] * 9, rule="summed") == 1
    with pytest.raises(ValueError):
        classify(1.0, 1.0, rule="vote")


@given(st.floats(0, 10), st.lists(st.floats(0, 10), max_size=12), st.floats(0.1, 5), st.floats(0, 3))
def test_classify_monotone_in_score(s, hist, theta, bump):
    assert classify(s + bump, theta, hist) >= classify(s, theta, hist)
    assert classify(s, theta + bump, hist) <= classify(s, theta, hist)


def test_update_threshold():
    th = update_threshold([0.3, 1.7, 0.2], "gen0")
    assert th.theta == 1.7 and th.source == "max_training_loss" and th.training_set_id == "gen0"
    with pytest.raises(EmptyTrainingSet):
        update_threshold([])
    with pytest.raises(ValueError):
        update_threshold([1.0, np.nan])


def test_training_windows_do_not_exceed_theta(fitted):
    det, x = fitted
    losses = det.reconstruction_loss(x)
    assert losses.max() <= det.theta + 1e-9
    assert det.theta == pytest.approx(det.training_losses_.max())
    assert det.predict(x).sum() == 0


def test_spike_exceeds_theta(fitted):
    det, x = fitted
    w = x[100:110].copy()
    w[5] += 10 * x.std()
    assert det.reconstruction_loss(w[None])[0] > det.theta
    assert det.predict(w[None])[0] == 1
    assert det.decision_function(w[None])[0] < 0


def test_score_matches_batch(fitted):
    det, x = fitted
    w = det._scale(x[:10])
    assert score(det.model_, w) == pytest.approx(neural.window_losses(det.model_, w[None])[0], abs=1e-12)
    with pytest.raises(ValueError):
        score(det.model_, w[:5])


def test_encodings_and_sklearn_api(fitted):
    det, x = fitted
    assert det.transform(x).shape == (len(x) - 9, 2)
    assert det.training_encodings_.shape == (len(x) - 9, 2)
    np.testing.assert_allclose(det.score_samples(x), -det.reconstruction_loss(x))
    params = det.get_params()
    assert params["timestep"] == 10 and params["beta"] == 0.1
    fresh = clone(det)
    assert not hasattr(fresh, "model_") and fresh.get_params() == params


def test_deterministic_fit():
    x = np.random.default_rng(3).normal(size=200)
    a = LSTMVAEDetector(epochs=2, random_state=5).fit(x)
    b = LSTMVAEDetector(epochs=2, random_state=5).fit(x)
    assert a.theta == b.theta
    np.testing.assert_array_equal(a.reconstruction_loss(x), b.reconstruction_loss(x))


def test_fit_errors():
    with pytest.raises(EmptyTrainingSet):
        LSTMVAEDetector().fit(np.arange(5.0))
    with pytest.raises(ValueError):
        LSTMVAEDetector(timestep=10).fit(np.zeros((4, 7)))
