"""STL decomposition of a reference year and online residualization.

The decomposition follows Cleveland et al.'s inner/outer loop with the
"periodic" seasonal smoother: each cycle-subseries is replaced by its
(robustness-weighted) mean, so the seasonal component is exactly periodic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import SeriesTooShort

HISTORY_LENGTH = 17520


@dataclass(frozen=True)
class Decomposition:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray
    period: int = 336

    def __len__(self):
        return len(self.trend)

    @property
    def observed(self) -> np.ndarray:
        return self.trend + self.seasonal + self.residual

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "trend", "seasonal", "residual"])
            for t in range(len(self)):
                w.writerow([t, repr(float(self.trend[t])), repr(float(self.seasonal[t])),
                            repr(float(self.residual[t]))])

    @classmethod
    def from_csv(cls, path, period: int = 336) -> "Decomposition":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1].copy(), data[:, 2].copy(), data[:, 3].copy(), period)


def _next_odd(x: float) -> int:
    n = int(np.ceil(x))
    return n if n % 2 else n + 1


def loess(y: np.ndarray, span: int, weights: np.ndarray | None = None, degree: int = 1,
          chunk: int = 1024) -> np.ndarray:
    """Loess smooth of an equally spaced series, evaluated at every point.

    Neighbourhoods, tricube weights and the degree-1 adjustment follow the
    reference STL Fortran routine ``est``.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    rw = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    q = min(span, n)
    half = (span - 1) // 2
    out = np.empty(n)
    offsets = np.arange(q)
    for a in range(0, n, chunk):
        xs = np.arange(a, min(a + chunk, n))
        lo = np.clip(xs - half, 0, n - q)
        idx = lo[:, None] + offsets
        hi = lo + q - 1
        h = np.maximum(xs - lo, hi - xs).astype(float)
        if span > n:
            h += (span - n) // 2
        r = np.abs(idx - xs[:, None]).astype(float)
        ratio = r / h[:, None]
        w = np.where(r <= 0.001 * h[:, None], 1.0, (1.0 - ratio**3) ** 3)
        w = np.where(r > 0.999 * h[:, None], 0.0, w)
        w = w * rw[idx]
        total = w.sum(axis=1)
        ok = total > 0
        w[ok] /= total[ok, None]
        if degree == 1:
            centre = (w * idx).sum(axis=1)
            spread = (w * (idx - centre[:, None]) ** 2).sum(axis=1)
            rng_ = float(n - 1)
            adj = np.sqrt(spread) > 0.001 * rng_
            b = np.where(adj, (xs - centre) / np.where(adj, spread, 1.0), 0.0)
            w = w * (b[:, None] * (idx - centre[:, None]) + 1.0)
        fitted = (w * y[idx]).sum(axis=1)
        out[xs] = np.where(ok, fitted, y[xs])
    return out


def _periodic_seasonal(detrended: np.ndarray, period: int, rw: np.ndarray) -> np.ndarray:
    n = len(detrended)
    phase = np.arange(n) % period
    wsum = np.bincount(phase, weights=rw, minlength=period)
    ysum = np.bincount(phase, weights=rw * detrended, minlength=period)
    plain = np.bincount(phase, weights=detrended, minlength=period) / np.bincount(phase, minlength=period)
    means = np.where(wsum > 0, ysum / np.where(wsum > 0, wsum, 1.0), plain)
    # the low-pass of an exactly periodic sequence is its one-period mean
    means = means - means.mean()
    return means[phase]


def _robustness_weights(resid: np.ndarray) -> np.ndarray:
    r = np.abs(resid)
    h = 6.0 * np.median(r)
    if h == 0:
        return np.ones_like(r)
    w = (1.0 - (r / h) ** 2) ** 2
    w = np.where(r <= 0.001 * h, 1.0, w)
    return np.where(r > 0.999 * h, 0.0, w)


def stl_decompose(series, period: int = 336, inner_iter: int = 2, outer_iter: int = 1,
                  trend_window: int | None = None) -> Decomposition:
    """Additive seasonal-trend decomposition with a periodic seasonal smoother.

    Parameters
    ----------
    series : array-like, shape (n,)
    period : int
        Seasonal period in steps (336 = one week at 30-minute sampling).
    inner_iter, outer_iter : int
        Inner smoothing passes and robustness passes.
    trend_window : int, optional
        Loess span of the trend smoother; defaults to the next odd integer
        >= 1.5 * period.
    """
    y = np.asarray(series, dtype=float).ravel()
    if period < 2:
        raise ValueError("period must be >= 2")
    if len(y) < 2 * period:
        raise SeriesTooShort(f"need at least {2 * period} points, got {len(y)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    nt = trend_window or _next_odd(1.5 * period)
    rw = np.ones(len(y))
    trend = np.zeros(len(y))
    seasonal = np.zeros(len(y))
    for k in range(outer_iter + 1):
        for _ in range(inner_iter):
            seasonal = _periodic_seasonal(y - trend, period, rw)
            trend = loess(y - seasonal, nt, rw)
        if k < outer_iter:
            rw = _robustness_weights(y - trend - seasonal)
    return Decomposition(trend, seasonal, y - trend - seasonal, period)


def residualize(x_t: float, step_index: int, hist: Decomposition, subtract_residual: bool = True) -> float:
    """Remove the reference trend (and residual) at the matching step of the reference year."""
    idx = step_index % len(hist)
    out = x_t - hist.trend[idx]
    if subtract_residual:
        out = out - hist.residual[idx]
    return out


def residualize_series(x, hist: Decomposition, start: int = 0, subtract_residual: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    idx = (start + np.arange(len(x))) % len(hist)
    out = x - hist.trend[idx]
    if subtract_residual:
        out = out - hist.residual[idx]
    return out


class STLResidualizer(TransformerMixin, BaseEstimator):
    """Fit STL on a reference series, then residualize live values step by step.

    ``transform`` treats row ``i`` of ``X`` as step ``start_step + i``.
    """

    def __init__(self, period=336, inner_iter=2, outer_iter=1, subtract_residual=True):
        self.period = period
        self.inner_iter = inner_iter
        self.outer_iter = outer_iter
        self.subtract_residual = subtract_residual

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.decompositions_ = [
            stl_decompose(X[:, j], self.period, self.inner_iter, self.outer_iter)
            for j in range(X.shape[1])
        ]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, start_step: int = 0):
        check_is_fitted(self, "decompositions_")
        X = np.asarray(X, dtype=float)
        flat = X.ndim == 1
        if flat:
            X = X[:, None]
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        out = np.column_stack([
            residualize_series(X[:, j], d, start_step, self.subtract_residual)
            for j, d in enumerate(self.decompositions_)
        ])
        return out[:, 0] if flat else out
