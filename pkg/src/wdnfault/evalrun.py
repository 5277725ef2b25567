"""Prequential evaluation and the per-sensor streaming pipeline."""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import drift as dr
from .detector import CLASSIFY_RULES, LSTMVAEDetector, classify
from .exceptions import ConfigError, WDNFaultError
from .hydronet import downstream_nodes, solve_steady_state
from .preprocess import residualize_series, stl_decompose
from .scenario import LabeledStream, Scenario, generate_with_history, standard_timeline

_EPS = 1e-12


@dataclass
class PrequentialTracker:
    alpha: float = 0.99
    tp: float = 0.0
    p: float = 0.0
    tn: float = 0.0
    n: float = 0.0
    gmeans: list = field(default_factory=list)

    @property
    def recalls(self) -> tuple[float, float]:
        rp = self.tp / self.p if self.p > _EPS else 1.0
        rn = self.tn / self.n if self.n > _EPS else 1.0
        return rp, rn

    @property
    def gmean(self) -> float:
        rp, rn = self.recalls
        return math.sqrt(rp * rn)


def preq_update(tracker: PrequentialTracker, y: int, y_hat: int) -> float:
    """Fade all counters, count the new outcome, append and return the G-mean."""
    if y not in (0, 1) or y_hat not in (0, 1):
        raise ValueError("labels must be 0 or 1")
    a = tracker.alpha
    tracker.tp *= a
    tracker.p *= a
    tracker.tn *= a
    tracker.n *= a
    if y == 1:
        tracker.p += 1.0
        tracker.tp += float(y_hat == 1)
    else:
        tracker.n += 1.0
        tracker.tn += float(y_hat == 0)
    g = tracker.gmean
    tracker.gmeans.append(g)
    return g


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run; defaults are the reference hyperparameters."""

    scenario: object = "standard"  # "standard", a scenario JSON path, or an inline dict
    sensors: tuple | None = None
    seed: int = 0
    scenario_seed: int | None = None
    output_dir: str | None = None
    warmup: int = 1000
    period: int = 336
    subtract_residual: bool = True
    timestep: int = 10
    hidden_size: int = 8
    latent_dim: int = 2
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 100
    dropout: float = 0.1
    beta: float = 0.1
    leaky_slope: float = 0.01
    output_activation: str = "linear"
    standardize: bool = True
    classify_rule: str = "windowed_mean"
    fading_factor: float = 0.99
    drift: dr.DriftConfig = field(default_factory=dr.DriftConfig)

    def __post_init__(self):
        if self.sensors is not None:
            object.__setattr__(self, "sensors", tuple(str(s) for s in self.sensors))
        if isinstance(self.drift, dict):
            object.__setattr__(self, "drift", dr.DriftConfig.from_dict(self.drift))
        if self.classify_rule not in CLASSIFY_RULES:
            raise ConfigError(f"classify_rule must be one of {CLASSIFY_RULES}")
        if self.output_activation not in ("linear", "softmax"):
            raise ConfigError("output_activation must be 'linear' or 'softmax'")
        if self.warmup < self.timestep:
            raise ConfigError("warmup must cover at least one window")
        if not 0 < self.fading_factor <= 1:
            raise ConfigError("fading_factor must be in (0, 1]")
        for name in ("timestep", "hidden_size", "latent_dim", "batch_size", "epochs", "period"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["drift"] = self.drift.to_dict()
        if d["sensors"] is not None:
            d["sensors"] = list(d["sensors"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        # relative scenario paths are taken relative to the config file
        scn = d.get("scenario")
        if isinstance(scn, str) and scn != "standard" and not Path(scn).is_absolute():
            d["scenario"] = str(Path(path).parent / scn)
        return cls.from_dict(d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def build_scenario(self) -> Scenario:
        if isinstance(self.scenario, Scenario):
            scn = self.scenario
        elif self.scenario == "standard":
            scn = standard_timeline(self.seed if self.scenario_seed is None else self.scenario_seed)
        elif isinstance(self.scenario, dict):
            scn = Scenario.from_dict(self.scenario)
        else:
            scn = Scenario.load(self.scenario)
        if self.scenario_seed is not None:
            scn = replace(scn, rng_seed=self.scenario_seed)
        return scn

    def detector(self, random_state=None) -> LSTMVAEDetector:
        return LSTMVAEDetector(
            timestep=self.timestep, hidden_size=self.hidden_size, latent_dim=self.latent_dim,
            beta=self.beta, dropout=self.dropout, learning_rate=self.learning_rate,
            epochs=self.epochs, batch_size=self.batch_size, leaky_slope=self.leaky_slope,
            output_activation=self.output_activation, standardize=self.standardize,
            random_state=random_state,
        )


def _model_seed(seed: int, sensor_index: int, generation: int) -> int:
    return int(np.random.SeedSequence([seed, sensor_index, generation]).generate_state(1)[0])


@dataclass
class SensorResult:
    sensor: str
    steps: np.ndarray
    scores: np.ndarray
    thetas: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    gmeans: np.ndarray
    drift_log: dr.DriftLog
    alarms: list  # (step, source)
    retrains: list  # (step, kind, n_training_values, theta)

    def write(self, out_dir: Path) -> None:
        with open(out_dir / f"detection_{self.sensor}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "score", "theta", "prediction"])
            for row in zip(self.steps, self.scores, self.thetas, self.predictions):
                w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), int(row[3])])
        self.drift_log.to_csv(out_dir / f"drift_{self.sensor}.csv")
        with open(out_dir / f"metrics_{self.sensor}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "y", "y_hat", "gmean"])
            for row in zip(self.steps, self.labels, self.predictions, self.gmeans):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3]))])


def run_sensor(cfg: RunConfig, values, hist_values, anomaly_label, sensor: str = "0",
               sensor_index: int = 0) -> SensorResult:
    """Stream one sensor through residualize, score, classify, drift test and retrain."""
    x = np.asarray(values, dtype=float)
    hist = stl_decompose(hist_values, cfg.period)
    r = residualize_series(x, hist, 0, cfg.subtract_residual)
    T, k = len(r), cfg.timestep
    if T <= cfg.warmup:
        raise ConfigError(f"stream of {T} steps is shorter than the warm-up")

    generation = 0
    det = cfg.detector(_model_seed(cfg.seed, sensor_index, generation)).fit(r[:cfg.warmup])
    dcfg = cfg.drift
    dis_thre = dcfg.DIS_thre
    if dis_thre is None:
        dis_thre = dr.calibrate_dis_threshold(det.training_encodings_, det.training_losses_,
                                              dcfg.W_distance, dcfg.dis_calibration_factor,
                                              dcfg.dis_calibration_blocks)
    state = dr.DriftState(dcfg, dis_thre)
    log = dr.DriftLog()
    tracker = PrequentialTracker(cfg.fading_factor)
    n_out = T - cfg.warmup
    scores, thetas = np.empty(n_out), np.empty(n_out)
    preds = np.empty(n_out, dtype=int)
    alarms, retrains = [], []
    recent = deque(maxlen=k - 1)

    def rescore(start):
        windows = np.lib.stride_tricks.sliding_window_view(r[start - k + 1:], k)
        return det.score_and_encode(windows)

    seg_start = cfg.warmup
    seg_scores, seg_enc = rescore(seg_start)
    for t in range(cfg.warmup, T):
        i = t - seg_start
        s = float(seg_scores[i])
        y_hat = classify(s, det.theta, recent, span=k, rule=cfg.classify_rule)
        recent.append(s)
        j = t - cfg.warmup
        scores[j], thetas[j], preds[j] = s, det.theta, y_hat
        preq_update(tracker, int(anomaly_label[t]), y_hat)
        try:
            state, action = dr.drift_step(state, "anomalous" if y_hat else "normal", seg_enc[i], r[t])
        except WDNFaultError as exc:
            exc.step = t
            raise
        log.record(t, state, action)
        if state.flag_alarm and action != "none":
            alarms.append((t, state.alarm_source))
        data = None
        if action == "retrain_from_warnbuf":
            data, kind = np.array(state.mov_warn), "warn_buffer"
        elif state.retrain_ready:
            data, kind = np.array(state.collect), "post_alarm"
        if data is not None and t + 1 < T:
            generation += 1
            det, theta, state = dr.execute_retrain(
                det, state, data, dcfg.retrain_epochs,
                random_state=_model_seed(cfg.seed, sensor_index, generation),
                training_set_id=f"{sensor}:{generation}")
            retrains.append((t, kind, len(data), theta))
            recent.clear()
            seg_start = t + 1
            seg_scores, seg_enc = rescore(seg_start)

    return SensorResult(sensor, np.arange(cfg.warmup, T), scores, thetas, preds,
                        np.asarray(anomaly_label[cfg.warmup:], dtype=int), np.array(tracker.gmeans),
                        log, alarms, retrains)


def _intervals(mask: np.ndarray) -> list[tuple[int, int]]:
    d = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def stationary_mask(anomaly_label, drift_label, settle: int = 1000) -> np.ndarray:
    """Steps with no anomaly and no label change during the preceding ``settle`` steps."""
    a = np.asarray(anomaly_label, dtype=int)
    d = np.asarray(drift_label, dtype=int)
    change = np.zeros(len(a), dtype=bool)
    change[1:] = (np.diff(a) != 0) | (np.diff(d) != 0)
    last = np.maximum.accumulate(np.where(change, np.arange(len(a)), -10**9))
    return (a == 0) & (np.arange(len(a)) - last >= settle)


def summarize(res: SensorResult, anomaly_label, drift_label, warmup: int) -> dict:
    a = np.asarray(anomaly_label, dtype=int)
    steps = res.steps
    g = res.gmeans
    in_block = a[steps] == 1
    stat = stationary_mask(a, drift_label)[steps]
    alarm_steps = [s for s, _ in res.alarms]
    recoveries = []
    prev = warmup
    for step, *_ in res.retrains:
        lo = max(prev, step - 1000)
        seg = g[lo - warmup:step - warmup + 1]
        after = step + 500
        recoveries.append({
            "retrain_step": int(step),
            "trough": float(seg.min()) if len(seg) else None,
            "gmean_after_500": float(g[after - warmup]) if after - warmup < len(g) else None,
        })
        prev = step + 1
    return {
        "sensor": res.sensor,
        "n_predictions": int(len(steps)),
        "mean_gmean_blockage": float(g[in_block].mean()) if in_block.any() else None,
        "final_gmean": float(g[-1]),
        "true_positives": int(np.sum(res.predictions[in_block])),
        "false_positives": int(np.sum(res.predictions[~in_block])),
        "anomaly_rate_normal": float(res.predictions[~in_block].mean()) if (~in_block).any() else 0.0,
        "drift_alarms": [{"step": int(s), "source": src} for s, src in res.alarms],
        "false_drift_alarms": int(sum(stat[s - warmup] for s in alarm_steps)),
        "retrains": [{"step": int(s), "kind": kd, "n_values": int(n), "theta": float(th)}
                     for s, kd, n, th in res.retrains],
        "recoveries": recoveries,
        "initial_theta": float(res.thetas[0]),
    }


def _json_dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_pipeline(cfg: RunConfig, stream: LabeledStream | None = None,
                 history: LabeledStream | None = None) -> dict:
    """Full run over every selected sensor; writes artifacts when ``cfg.output_dir`` is set.

    Returns the summary dict (also saved as ``summary.json``).
    """
    scn = cfg.build_scenario()
    if stream is None or history is None:
        stream, history = generate_with_history(scn)
    sensors = cfg.sensors or tuple(stream.sensor_ids)
    unknown = set(sensors) - set(stream.sensor_ids)
    if unknown:
        raise ConfigError(f"sensors not in the stream: {sorted(unknown)}")
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        scn.save(out / "scenario.json")
    per_sensor = {}
    for s in sensors:
        idx = stream.sensor_ids.index(s)
        res = run_sensor(cfg, stream.sensor(s), history.sensor(s), stream.anomaly_label, s, idx)
        per_sensor[s] = summarize(res, stream.anomaly_label, stream.drift_label, cfg.warmup)
        if out is not None:
            res.write(out)
    summary = {"seed": cfg.seed, "scenario_seed": scn.rng_seed, "warmup": cfg.warmup,
               "sensors": per_sensor}
    if scn.blockage_events:
        summary["flow_tags"] = flow_tags(scn)
    if out is not None:
        _json_dump(summary, out / "summary.json")
    return summary


def flow_tags(scn: Scenario) -> dict:
    """Per blocked pipe, a downstream/upstream tag for every sensor from pre-event flows."""
    net = scn.load_network()
    tags = {}
    for ev in scn.blockage_events:
        if ev.pipe_id in tags:
            continue
        t = max(ev.start_step - 1, 0)
        mult = scn.demand.multipliers(t, len(net.junctions), scn.rng_seed)
        leaks = tuple(e.leak for e in scn.leak_events if e.active(t))
        state = solve_steady_state(net, leaks, mult)
        down = downstream_nodes(net, state, ev.pipe_id)
        tags[ev.pipe_id] = {s: ("downstream" if s in down else "upstream") for s in scn.sensor_nodes}
    return tags


def _read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 3].astype(int)


def downstream_report(run_dir, blocked_pipe: str | None = None) -> list[dict]:
    """Per-sensor TP/FP counts around the blockages of one pipe, with flow tags."""
    run_dir = Path(run_dir)
    scn = Scenario.load(run_dir / "scenario.json")
    cfg = RunConfig.load(run_dir / "config.json")
    pipes = sorted({e.pipe_id for e in scn.blockage_events})
    if blocked_pipe is None:
        if not pipes:
            raise ConfigError("scenario has no blockage events")
        blocked_pipe = pipes[0]
    events = [e for e in scn.blockage_events if e.pipe_id == str(blocked_pipe)]
    if not events:
        raise ConfigError(f"no blockage of pipe {blocked_pipe} in the scenario")
    tags = flow_tags(scn)[str(blocked_pipe)]
    sensors = cfg.sensors or scn.sensor_nodes
    rows = []
    for s in sensors:
        steps, pred = _read_predictions(run_dir / f"detection_{s}.csv")
        inside = np.zeros(len(steps), dtype=bool)
        for e in events:
            inside |= (steps >= e.start_step) & (steps < e.end_step)
        anomalous = np.zeros(len(steps), dtype=bool)
        for e in scn.blockage_events:
            anomalous |= (steps >= e.start_step) & (steps < e.end_step)
        rows.append({"sensor": s, "tag": tags.get(s, "unknown"),
                     "tp": int(pred[inside].sum()), "fp": int(pred[~anomalous].sum())})
    return rows


def median_tp_by_tag(rows: list[dict]) -> dict:
    out = {}
    for tag in ("downstream", "upstream"):
        tps = [r["tp"] for r in rows if r["tag"] == tag]
        out[tag] = float(np.median(tps)) if tps else None
    return out


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se
