"""Dual drift detection over latent encodings, buffer bookkeeping and retraining."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np
from sklearn.base import clone

from .exceptions import BufferNotFull, ConfigError, EmptySample, EmptyTrainingSet

ACTIONS = ("none", "warn", "retrain_from_warnbuf", "retrain_after_collect")
_SERIES_TOL = 1e-12
_SERIES_MAX_TERMS = 100


@dataclass(frozen=True)
class DriftConfig:
    W_drift: int = 200
    W_distance: int = 50
    W_warn: int = 1000
    P_warn: float = 0.01
    P_alarm: float = 0.0001
    DIS_thre: float | None = None
    expiry_time: int = 100
    retrain_epochs: int = 500
    post_alarm_collect: int = 500
    # "printed" uses W_drift / 2 as the effective sample size, "conventional" n*m/(n+m)
    n_eff: str = "printed"
    # warn buffers smaller than this fall back to post-alarm collection
    min_warn_samples: int = 300
    dis_calibration_factor: float = 3.0
    dis_calibration_blocks: int = 4

    def __post_init__(self):
        for name in ("W_drift", "W_distance", "W_warn", "expiry_time", "retrain_epochs",
                     "post_alarm_collect", "min_warn_samples", "dis_calibration_blocks"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.P_alarm < self.P_warn < 1:
            raise ConfigError("need 0 < P_alarm < P_warn < 1")
        if self.n_eff not in ("printed", "conventional"):
            raise ConfigError(f"n_eff must be 'printed' or 'conventional', got {self.n_eff!r}")
        if self.DIS_thre is not None and not self.DIS_thre > 0:
            raise ConfigError("DIS_thre must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown drift config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class DriftState:
    config: DriftConfig
    dis_thre: float | None = None
    ref_N: deque = field(init=False)
    mov_N: deque = field(init=False)
    ref_AN: deque = field(init=False)
    mov_AN: deque = field(init=False)
    mov_warn: deque = field(init=False)
    flag_warn: bool = False
    flag_alarm: bool = False
    warn_age: int = 0
    alarm_source: str = "none"
    # post-alarm collection; None when no collection is pending
    collect: list | None = None
    # retrain action already handed out for the current alarm
    retrain_scheduled: str | None = None
    last_p_star: float | None = None
    last_dis: float | None = None

    def __post_init__(self):
        c = self.config
        if self.dis_thre is None:
            self.dis_thre = c.DIS_thre
        self.ref_N = deque(maxlen=c.W_drift)
        self.mov_N = deque(maxlen=c.W_drift)
        self.ref_AN = deque(maxlen=c.W_distance)
        self.mov_AN = deque(maxlen=c.W_distance)
        self.mov_warn = deque(maxlen=c.W_warn)

    @property
    def buffers(self) -> dict:
        return {"ref_N": self.ref_N, "mov_N": self.mov_N, "ref_AN": self.ref_AN,
                "mov_AN": self.mov_AN, "mov_warn": self.mov_warn}

    @property
    def collecting(self) -> bool:
        return self.collect is not None

    @property
    def retrain_ready(self) -> bool:
        return self.collect is not None and len(self.collect) >= self.config.post_alarm_collect

    def reset(self) -> None:
        """Post-retrain reset: every buffer emptied (references refill from new data), flags cleared."""
        for buf in self.buffers.values():
            buf.clear()
        self.flag_warn = self.flag_alarm = False
        self.warn_age = 0
        self.alarm_source = "none"
        self.collect = None
        self.retrain_scheduled = None


def ks_statistic(ref, mov) -> float:
    a = np.sort(np.asarray(ref, dtype=float).ravel())
    b = np.sort(np.asarray(mov, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptySample("KS test needs two nonempty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_pvalue(ks_dis: float, n_eff: float) -> float:
    """Asymptotic Kolmogorov tail with the small-sample correction on the scale factor."""
    if ks_dis <= 0:
        return 1.0
    s = math.sqrt(n_eff)
    gamma = (s + 0.12 + 0.11 / s) * ks_dis
    total = 0.0
    for i in range(1, _SERIES_MAX_TERMS + 1):
        term = (-1) ** (i - 1) * math.exp(-2.0 * i * i * gamma * gamma)
        if abs(term) < _SERIES_TOL:
            break
        total += term
    else:
        # series did not converge: distance too small to be significant
        return 1.0
    return min(1.0, max(0.0, 2.0 * total))


def effective_size(n: int, m: int, w_drift: int | None = None, mode: str = "printed") -> float:
    if mode == "conventional":
        return n * m / (n + m)
    w = w_drift if w_drift is not None else n
    return w * w / (2.0 * w)


def ks_two_sample(ref, mov, w_drift: int | None = None, mode: str = "printed") -> float:
    return ks_test(ref, mov, w_drift, mode)[1]


def ks_test(ref, mov, w_drift: int | None = None, mode: str = "printed") -> tuple[float, float]:
    """(KS distance, p-value)."""
    d = ks_statistic(ref, mov)
    n, m = np.size(ref), np.size(mov)
    return d, ks_pvalue(d, effective_size(n, m, w_drift, mode))


def combined_pvalue(ref: np.ndarray, mov: np.ndarray, w_drift: int | None = None, mode: str = "printed") -> float:
    """Bonferroni-corrected minimum of the per-dimension p-values."""
    ref = np.asarray(ref, dtype=float)
    mov = np.asarray(mov, dtype=float)
    dims = ref.shape[1]
    p = min(ks_two_sample(ref[:, j], mov[:, j], w_drift, mode) for j in range(dims))
    return min(1.0, dims * p)


def dd1_step(state: DriftState, encoding) -> float | None:
    """Route a normal encoding; test once the moving window is full.  Returns p* or None."""
    c = state.config
    enc = np.asarray(encoding, dtype=float).ravel()
    if len(state.ref_N) < c.W_drift:
        state.ref_N.append(enc)
        return None
    state.mov_N.append(enc)
    if len(state.mov_N) < c.W_drift:
        return None
    p = combined_pvalue(np.array(state.ref_N), np.array(state.mov_N), c.W_drift, c.n_eff)
    if p < c.P_warn and not state.flag_warn:
        state.flag_warn = True
        state.warn_age = 0
    if p < c.P_alarm and not state.flag_alarm:
        state.flag_alarm = True
        state.alarm_source = "DD1"
    return p


def distance_test(ref_AN, mov_AN, dis_thre: float, w_distance: int | None = None) -> tuple[float, bool]:
    ref = np.asarray(ref_AN, dtype=float)
    mov = np.asarray(mov_AN, dtype=float)
    rows = w_distance if w_distance is not None else max(len(ref), len(mov))
    if ref.ndim != 2 or ref.shape != mov.shape or len(ref) != rows:
        raise BufferNotFull(f"distance test needs two full {rows}-row matrices, "
                            f"got {ref.shape} and {mov.shape}")
    dis = float(np.sqrt(np.sum((ref - mov) ** 2)))
    return dis, dis > dis_thre


def dd2_step(state: DriftState, encoding) -> float | None:
    c = state.config
    enc = np.asarray(encoding, dtype=float).ravel()
    if len(state.ref_AN) < c.W_distance:
        state.ref_AN.append(enc)
        return None
    state.mov_AN.append(enc)
    if len(state.mov_AN) < c.W_distance or state.dis_thre is None:
        return None
    dis, alarm = distance_test(state.ref_AN, state.mov_AN, state.dis_thre, c.W_distance)
    if alarm and not state.flag_alarm:
        state.flag_alarm = True
        state.alarm_source = "DD2"
    return dis


def drift_step(state: DriftState, instance_kind: str, encoding, raw_value: float) -> tuple[DriftState, str]:
    """Advance the drift state machine by one classified instance.

    While a post-alarm collection is pending the instance is only buffered;
    once ``state.retrain_ready`` holds the caller retrains on ``state.collect``.
    """
    c = state.config
    state.last_p_star = state.last_dis = None
    if state.collect is not None:
        state.collect.append(float(raw_value))
        return state, "none"
    if state.retrain_scheduled is not None:
        # the model is about to be replaced; nothing is tested until the reset
        return state, "none"

    if state.flag_warn:
        state.warn_age += 1
        if state.warn_age > c.expiry_time:
            state.flag_warn = False
            state.warn_age = 0
            state.mov_warn.clear()

    was_warned = state.flag_warn
    if instance_kind == "normal":
        state.last_p_star = dd1_step(state, encoding)
    elif instance_kind == "anomalous":
        state.last_dis = dd2_step(state, encoding)
    else:
        raise ValueError(f"instance_kind must be 'normal' or 'anomalous', got {instance_kind!r}")

    if state.flag_warn:
        state.mov_warn.append(float(raw_value))

    if state.flag_alarm:
        if state.alarm_source == "DD1" and len(state.mov_warn) >= c.min_warn_samples:
            action = "retrain_from_warnbuf"
        else:
            action = "retrain_after_collect"
            state.collect = []
        state.retrain_scheduled = action
        return state, action
    if state.flag_warn and not was_warned:
        return state, "warn"
    return state, "none"


def calibrate_dis_threshold(encodings, losses, w_distance: int = 50, factor: float = 3.0,
                            n_blocks: int = 4, anomalous=None) -> float | None:
    """Offline distance threshold from training-time encodings.

    Uses the anomaly-classified encodings when there are enough of them for
    two blocks, otherwise the highest-loss ones; rows stay in arrival order.
    The threshold is ``factor`` times the largest distance between successive
    disjoint ``w_distance``-row blocks.
    """
    enc = np.asarray(encodings, dtype=float)
    losses = np.asarray(losses, dtype=float)
    idx = None
    if anomalous is not None:
        cand = np.flatnonzero(np.asarray(anomalous, dtype=bool))
        if len(cand) >= 2 * w_distance:
            idx = cand
    if idx is None:
        k = min(len(enc), n_blocks * w_distance)
        k -= k % w_distance
        if k < 2 * w_distance:
            return None
        idx = np.sort(np.argsort(losses, kind="stable")[::-1][:k])
    nb = len(idx) // w_distance
    blocks = [enc[idx[i * w_distance:(i + 1) * w_distance]] for i in range(nb)]
    dis = [float(np.sqrt(np.sum((blocks[i + 1] - blocks[i]) ** 2))) for i in range(nb - 1)]
    return factor * max(dis) if max(dis) > 0 else None


def execute_retrain(detector, state: DriftState, training_data, epochs: int | None = None,
                    random_state=None, training_set_id: str | None = None):
    """Fit a freshly initialized copy of ``detector`` on ``training_data``.

    Returns (new detector, new theta, reset state).
    """
    data = np.asarray(training_data, dtype=float).ravel()
    if len(data) < detector.timestep:
        raise EmptyTrainingSet(f"retraining needs at least {detector.timestep} values, got {len(data)}")
    new = clone(detector).set_params(
        epochs=epochs if epochs is not None else state.config.retrain_epochs,
        random_state=random_state,
    )
    new.fit(data, training_set_id=training_set_id)
    state.reset()
    return new, new.theta, state


class DriftLog:
    """Accumulates rows of the drift event log."""

    header = ["step", "p_star", "dis", "flag_warn", "flag_alarm", "alarm_source", "action"]

    def __init__(self):
        self.rows = []

    def record(self, step: int, state: DriftState, action: str) -> None:
        self.rows.append((step, state.last_p_star, state.last_dis, state.flag_warn,
                          state.flag_alarm, state.alarm_source, action))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for step, p, d, fw, fa, src, act in self.rows:
                w.writerow([step, "" if p is None else repr(float(p)), "" if d is None else repr(float(d)),
                            int(fw), int(fa), src, act])
