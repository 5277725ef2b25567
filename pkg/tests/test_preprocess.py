import numpy as np
import pytest
from hypothesis import given, strategies as st

from wdnfault.exceptions import SeriesTooShort
from wdnfault.preprocess import (
    Decomposition, STLResidualizer, loess, residualize, residualize_series, stl_decompose,
)

P = 336


def test_constant_series():
    c = 42.5
    d = stl_decompose(np.full(1344, c), P)
    tol = 1e-6 * abs(c) + 1e-9
    assert np.abs(d.trend - c).max() <= tol
    assert np.abs(d.seasonal).max() <= tol
    assert np.abs(d.residual).max() <= tol


def test_sinusoid_recovered():
    t = np.arange(3360)
    s = 2.0 * np.sin(2 * np.pi * t / P)
    d = stl_decompose(s, P)
    inner = slice(P, -P)
    assert np.abs(d.seasonal[inner] - s[inner]).max() <= 0.05 * 2.0
    assert np.abs(d.trend[inner]).max() <= 0.05 * 2.0


def test_sinusoid_plus_ramp():
    t = np.arange(3360)
    s = np.sin(2 * np.pi * t / P)
    ramp = 0.002 * t + 5
    d = stl_decompose(s + ramp, P)
    inner = slice(P, -P)
    slope = np.polyfit(t[inner], d.trend[inner], 1)[0]
    assert slope == pytest.approx(0.002, rel=0.05)
    assert np.abs(d.seasonal[inner] - s[inner]).max() <= 0.05


def test_reconstruction_and_seasonal_mean():
    rng = np.random.default_rng(0)
    t = np.arange(2000)
    y = 50 + np.sin(2 * np.pi * t / P) + 0.3 * rng.normal(size=len(t)) + 0.001 * t
    d = stl_decompose(y, P)
    np.testing.assert_allclose(d.trend + d.seasonal + d.residual, y, atol=1e-9, rtol=0)
    for a in range(0, len(y) - P + 1, P):
        assert abs(d.seasonal[a:a + P].mean()) <= 1e-6 * np.abs(y).max()


def test_too_short():
    with pytest.raises(SeriesTooShort):
        stl_decompose(np.zeros(2 * P - 1), P)
    with pytest.raises(ValueError):
        stl_decompose(np.zeros(100), 1)


def test_deterministic():
    y = np.random.default_rng(1).normal(size=1000)
    a, b = stl_decompose(y, 48), stl_decompose(y, 48)
    assert a.trend.tobytes() == b.trend.tobytes() and a.seasonal.tobytes() == b.seasonal.tobytes()


def test_loess_reproduces_lines():
    # degree-1 loess is exact on straight lines, including the series ends
    y = 3.0 - 0.25 * np.arange(400)
    np.testing.assert_allclose(loess(y, 101), y, atol=1e-9)


def test_robustness_downweights_outliers():
    t = np.arange(10 * P)
    y = np.sin(2 * np.pi * t / P)
    y_out = y + 0.1 * np.random.default_rng(6).normal(size=len(t))
    y_out[500] += 3.0
    robust = stl_decompose(y_out, P, outer_iter=1)
    plain = stl_decompose(y_out, P, outer_iter=0)
    err_plain = abs(plain.seasonal[500 + P] - y[500 + P])
    err_robust = abs(robust.seasonal[500 + P] - y[500 + P])
    assert err_robust < 0.5 * err_plain


def test_residualize_identity_on_history():
    y = np.random.default_rng(2).normal(size=1000) + np.sin(np.arange(1000) / 7)
    d = stl_decompose(y, 48)
    np.testing.assert_allclose(residualize_series(y, d), d.seasonal, atol=1e-12)
    assert residualize(y[17] + 5.0, 17, d) == pytest.approx(d.seasonal[17] + 5.0, abs=1e-12)


def test_residualize_wraps_and_trend_only():
    y = np.random.default_rng(3).normal(size=700)
    d = stl_decompose(y, 48)
    assert residualize(1.0, 700 + 5, d) == residualize(1.0, 5, d)
    assert residualize(1.0, 5, d, subtract_residual=False) == pytest.approx(1.0 - d.trend[5])


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.integers(0, 10**6))
def test_residualize_linear(x, a, step):
    d = Decomposition(np.linspace(0, 1, 100), np.zeros(100), np.cos(np.arange(100)), 10)
    assert residualize(x + a, step, d) == pytest.approx(residualize(x, step, d) + a, abs=1e-9)


def test_csv_roundtrip(tmp_path):
    d = stl_decompose(np.random.default_rng(4).normal(size=200), 24)
    d.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "step,trend,seasonal,residual"
    back = Decomposition.from_csv(tmp_path / "d.csv", 24)
    np.testing.assert_array_equal(back.trend, d.trend)
    np.testing.assert_array_equal(back.residual, d.residual)


def test_estimator_api():
    rng = np.random.default_rng(5)
    hist = rng.normal(size=(800, 2))
    est = STLResidualizer(period=48).fit(hist)
    assert est.get_params()["period"] == 48
    out = est.transform(hist)
    np.testing.assert_allclose(out[:, 1], est.decompositions_[1].seasonal, atol=1e-12)
    shifted = est.transform(hist[10:20], start_step=10)
    np.testing.assert_allclose(shifted, out[10:20], atol=1e-12)
    with pytest.raises(ValueError):
        est.transform(rng.normal(size=(5, 3)))
