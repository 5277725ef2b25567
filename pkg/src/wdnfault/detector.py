"""Per-sensor anomaly decisions against the adaptive max-loss threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import neural
from .exceptions import EmptyTrainingSet

CLASSIFY_RULES = ("windowed_mean", "pointwise", "summed")


@dataclass(frozen=True)
class ThresholdState:
    theta: float
    source: str = "max_training_loss"
    training_set_id: str | None = None


def update_threshold(training_losses, training_set_id: str | None = None) -> ThresholdState:
    losses = np.asarray(training_losses, dtype=float).ravel()
    if losses.size == 0:
        raise EmptyTrainingSet("threshold needs at least one training loss")
    if not np.all(np.isfinite(losses)):
        raise ValueError("training losses must be finite")
    return ThresholdState(float(losses.max()), training_set_id=training_set_id)


def score(model: neural.SeqModel, w) -> float:
    """Eval-mode total loss of one full window."""
    w = np.asarray(w, dtype=float)
    if w.shape != (model.config.timestep,):
        raise ValueError(f"window must have length {model.config.timestep}")
    return float(neural.window_losses(model, w[None])[0])


def classify(score_value: float, theta, history=(), span: int = 10, rule: str = "windowed_mean") -> int:
    """Anomaly decision for the newest score.

    ``history`` holds the preceding scores (oldest first); the windowed mean
    covers the newest score plus up to ``span - 1`` of them.  Rules:

    * ``windowed_mean``: newest score > theta and windowed mean > theta
    * ``pointwise``: newest score > theta
    * ``summed``: windowed mean > theta (total exceedance over the window)
    """
    theta = theta.theta if isinstance(theta, ThresholdState) else float(theta)
    prev = list(history)[-(span - 1):] if span > 1 else []
    mean = (score_value + sum(prev)) / (len(prev) + 1)
    if rule == "windowed_mean":
        return int(score_value > theta and mean > theta)
    if rule == "pointwise":
        return int(score_value > theta)
    if rule == "summed":
        return int(mean > theta)
    raise ValueError(f"unknown classify rule {rule!r}; expected one of {CLASSIFY_RULES}")


class LSTMVAEDetector(OutlierMixin, BaseEstimator):
    """LSTM-VAE reconstruction scorer with a max-training-loss threshold.

    ``fit`` takes a 1-D series (windows are built internally) or a 2-D array
    of windows.  Inputs are standardized with the training mean and spread
    before they reach the network.  ``predict`` returns 1 for anomalous
    windows and 0 otherwise, using the pointwise rule; streaming decisions
    with the windowed rule go through :func:`classify`.
    """

    def __init__(self, timestep=10, hidden_size=8, latent_dim=2, beta=0.1, dropout=0.1,
                 learning_rate=0.001, epochs=100, batch_size=64, leaky_slope=0.01,
                 output_activation="linear", standardize=True, random_state=None):
        self.timestep = timestep
        self.hidden_size = hidden_size
        self.latent_dim = latent_dim
        self.beta = beta
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.leaky_slope = leaky_slope
        self.output_activation = output_activation
        self.standardize = standardize
        self.random_state = random_state

    def _model_config(self) -> neural.ModelConfig:
        return neural.ModelConfig(
            timestep=self.timestep, hidden_size=self.hidden_size, latent_dim=self.latent_dim,
            beta=self.beta, dropout=self.dropout, learning_rate=self.learning_rate,
            leaky_slope=self.leaky_slope, output_activation=self.output_activation,
        )

    def _as_windows(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return neural.make_windows(X, self.timestep)
        return check_array(X, ensure_min_samples=1)

    def fit(self, X, y=None, training_set_id=None):
        W = self._as_windows(X)
        if len(W) == 0:
            raise EmptyTrainingSet(f"need at least {self.timestep} values to form a window")
        if W.shape[1] != self.timestep:
            raise ValueError(f"windows must have length {self.timestep}")
        if self.standardize:
            self.center_ = float(W.mean())
            spread = float(W.std())
            self.scale_ = spread if spread > 1e-12 else 1.0
        else:
            self.center_, self.scale_ = 0.0, 1.0
        self.model_ = neural.SeqModel(self._model_config(), seed=self.random_state)
        Z = self._scale(W)
        _, losses = neural.train(self.model_, Z, self.epochs, self.batch_size)
        self.training_losses_ = losses
        self.threshold_ = update_threshold(losses, training_set_id)
        self.training_encodings_ = neural.score_and_encode(self.model_, Z)[1]
        return self

    def _scale(self, W):
        return (np.asarray(W, dtype=float) - self.center_) / self.scale_

    @property
    def theta(self) -> float:
        check_is_fitted(self, "threshold_")
        return self.threshold_.theta

    def score_and_encode(self, X):
        """Eval-mode losses and latent means for windows (rows) of raw values."""
        check_is_fitted(self, "model_")
        W = self._as_windows(X)
        return neural.score_and_encode(self.model_, self._scale(W))

    def reconstruction_loss(self, X) -> np.ndarray:
        return self.score_and_encode(X)[0]

    def transform(self, X) -> np.ndarray:
        """Latent means of the windows."""
        return self.score_and_encode(X)[1]

    def score_samples(self, X) -> np.ndarray:
        # sklearn convention: larger is more normal
        return -self.reconstruction_loss(X)

    def decision_function(self, X) -> np.ndarray:
        return self.theta - self.reconstruction_loss(X)

    def predict(self, X) -> np.ndarray:
        return (self.reconstruction_loss(X) > self.theta).astype(int)
