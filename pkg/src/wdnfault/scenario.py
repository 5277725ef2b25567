"""Labeled pressure streams: demand patterns, fault timelines and sensor noise."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import Disconnected, NetworkError, NonConvergence, ScenarioError
from .hydronet import (
    LeakSpec,
    Network,
    apply_blockage,
    hanoi_network,
    load_network,
    solve_steady_state,
)

BUNDLED_NETWORKS = {"hanoi": hanoi_network, "hanoi_like": hanoi_network}

# seed-sequence tags for independent random sub-streams
_DEMAND_TAG = 11
_NOISE_TAG = 23
_HISTORY_NOISE_TAG = 37


@dataclass(frozen=True)
class DemandPattern:
    """Daily + weekly sinusoidal demand multiplier with per-node jitter.

    m(t) = max(floor, 1 + a_d sin(2 pi t / 48) + a_w sin(2 pi t / 336) + eps)
    """

    daily_amplitude: float = 0.3
    weekly_amplitude: float = 0.1
    jitter_std: float = 0.02
    daily_period: int = 48
    weekly_period: int = 336
    floor: float = 0.05

    def deterministic(self, step) -> np.ndarray:
        t = np.asarray(step, dtype=float)
        return (
            1.0
            + self.daily_amplitude * np.sin(2 * math.pi * t / self.daily_period)
            + self.weekly_amplitude * np.sin(2 * math.pi * t / self.weekly_period)
        )

    def jitter(self, step: int, n_nodes: int, seed: int) -> np.ndarray:
        if self.jitter_std == 0:
            return np.zeros(n_nodes)
        rng = np.random.default_rng([seed, _DEMAND_TAG, int(step)])
        return rng.normal(0.0, self.jitter_std, size=n_nodes)

    def multipliers(self, step: int, n_nodes: int, seed: int = 0) -> np.ndarray:
        """Per-junction multipliers for one step (network junction order)."""
        if step < 0:
            raise ValueError("step must be >= 0")
        base = float(self.deterministic(step))
        return np.maximum(self.floor, base + self.jitter(step, n_nodes, seed))


def demand_multiplier(step: int, node: int, n_nodes: int, pattern: DemandPattern | None = None, seed: int = 0) -> float:
    """Multiplier for junction index ``node`` at ``step``."""
    pattern = pattern or DemandPattern()
    return float(pattern.multipliers(step, n_nodes, seed)[node])


@dataclass(frozen=True)
class BlockageEvent:
    pipe_id: str
    start_step: int
    end_step: int

    def active(self, step: int) -> bool:
        return self.start_step <= step < self.end_step


@dataclass(frozen=True)
class LeakEvent:
    leak: LeakSpec
    start_step: int
    end_step: int

    def active(self, step: int) -> bool:
        return self.start_step <= step < self.end_step


@dataclass(frozen=True)
class Scenario:
    network: str = "hanoi"
    horizon_steps: int = 17520
    step_minutes: int = 30
    blockage_events: tuple = ()
    leak_events: tuple = ()
    noise_std: float = 0.1
    sensor_nodes: tuple = ()
    rng_seed: int = 0
    demand: DemandPattern = field(default_factory=DemandPattern)

    def __post_init__(self):
        object.__setattr__(self, "blockage_events", tuple(self.blockage_events))
        object.__setattr__(self, "leak_events", tuple(self.leak_events))
        object.__setattr__(self, "sensor_nodes", tuple(str(s) for s in self.sensor_nodes))

    def load_network(self) -> Network:
        if self.network in BUNDLED_NETWORKS:
            return BUNDLED_NETWORKS[self.network]()
        return load_network(self.network)

    def validate(self, net: Network | None = None) -> Network:
        net = net or self.load_network()
        if self.horizon_steps <= 0:
            raise ScenarioError("horizon_steps must be positive")
        if not self.noise_std >= 0:
            raise ScenarioError("noise_std must be >= 0")
        for ev in self.blockage_events + self.leak_events:
            if not (0 <= ev.start_step < ev.end_step <= self.horizon_steps):
                raise ScenarioError(f"event interval [{ev.start_step}, {ev.end_step}) outside horizon")
        pipe_ids = set(net.pipe_ids)
        for ev in self.blockage_events:
            if ev.pipe_id not in pipe_ids:
                raise ScenarioError(f"blockage on unknown pipe {ev.pipe_id}")
        junctions = set(net.junction_ids)
        for ev in self.leak_events:
            if ev.leak.node_id not in junctions:
                raise ScenarioError(f"leak at unknown junction {ev.leak.node_id}")
        missing = [s for s in self.sensor_nodes if s not in junctions]
        if missing:
            raise ScenarioError(f"sensor nodes are not junctions: {missing}")
        if not self.sensor_nodes:
            raise ScenarioError("at least one sensor node is required")
        return net

    def without_events(self) -> "Scenario":
        return replace(self, blockage_events=(), leak_events=())

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "horizon_steps": self.horizon_steps,
            "step_minutes": self.step_minutes,
            "blockage_events": [asdict(e) for e in self.blockage_events],
            "leak_events": [
                {"leak": e.leak.to_dict(), "start_step": e.start_step, "end_step": e.end_step}
                for e in self.leak_events
            ],
            "noise_std": self.noise_std,
            "sensor_nodes": list(self.sensor_nodes),
            "rng_seed": self.rng_seed,
            "demand": asdict(self.demand),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            return cls(
                network=str(d.get("network", "hanoi")),
                horizon_steps=int(d.get("horizon_steps", 17520)),
                step_minutes=int(d.get("step_minutes", 30)),
                blockage_events=[
                    BlockageEvent(str(e["pipe_id"]), int(e["start_step"]), int(e["end_step"]))
                    for e in d.get("blockage_events", [])
                ],
                leak_events=[
                    LeakEvent(LeakSpec.from_dict(e["leak"]), int(e["start_step"]), int(e["end_step"]))
                    for e in d.get("leak_events", [])
                ],
                noise_std=float(d.get("noise_std", 0.1)),
                sensor_nodes=d.get("sensor_nodes", ()),
                rng_seed=int(d.get("rng_seed", 0)),
                demand=DemandPattern(**d.get("demand", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed scenario: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            scn = cls.from_dict(json.load(fh))
        # relative network paths resolve against the scenario file
        if scn.network not in BUNDLED_NETWORKS and not Path(scn.network).is_absolute():
            scn = replace(scn, network=str(Path(path).parent / scn.network))
        return scn

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


STANDARD_SENSORS = ("23", "29", "31", "16", "25", "13", "10", "6", "3", "22")


def standard_timeline(rng_seed: int = 0, sensor_nodes: Sequence[str] = STANDARD_SENSORS, **kw) -> Scenario:
    """Hanoi-like year: pipe 7 blocked at 2000-3000 and 8000-9000, node 14 leaking 5000-15000."""
    return Scenario(
        network="hanoi",
        blockage_events=(BlockageEvent("7", 2000, 3000), BlockageEvent("7", 8000, 9000)),
        leak_events=(LeakEvent(LeakSpec("14", 0.089), 5000, 15000),),
        sensor_nodes=tuple(sensor_nodes),
        rng_seed=rng_seed,
        **kw,
    )


@dataclass
class LabeledStream:
    sensor_ids: tuple
    pressures: np.ndarray  # (steps, sensors), pressure head [m]
    anomaly_label: np.ndarray
    drift_label: np.ndarray
    clean: np.ndarray | None = None

    def __len__(self):
        return len(self.anomaly_label)

    def sensor(self, node_id: str) -> np.ndarray:
        return self.pressures[:, self.sensor_ids.index(str(node_id))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *self.sensor_ids, "anomaly_label", "drift_label"])
            for t in range(len(self)):
                w.writerow(
                    [t, *(repr(float(v)) for v in self.pressures[t]),
                     int(self.anomaly_label[t]), int(self.drift_label[t])]
                )

    @classmethod
    def from_csv(cls, path) -> "LabeledStream":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = [h.strip() for h in rows[0]]
        if header[0] != "step" or header[-2:] != ["anomaly_label", "drift_label"]:
            raise ScenarioError(f"{path}: unexpected stream header {header}")
        body = np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(header))
        return cls(
            sensor_ids=tuple(header[1:-2]),
            pressures=body[:, 1:-2].copy(),
            anomaly_label=body[:, -2].astype(int),
            drift_label=body[:, -1].astype(int),
        )


def labels(scn: Scenario) -> tuple[np.ndarray, np.ndarray]:
    anomaly = np.zeros(scn.horizon_steps, dtype=int)
    drift = np.zeros(scn.horizon_steps, dtype=int)
    for ev in scn.blockage_events:
        anomaly[ev.start_step:ev.end_step] = 1
    for ev in scn.leak_events:
        drift[ev.start_step:ev.end_step] = 1
    return anomaly, drift


def _solve_clean(scn: Scenario, net: Network, with_events: bool, cache: dict | None = None) -> np.ndarray:
    n_nodes = len(net.junctions)
    sensor_idx = [net.junction_ids.index(s) for s in scn.sensor_nodes]
    variants: dict = {}
    out = np.empty((scn.horizon_steps, len(sensor_idx)))
    for t in range(scn.horizon_steps):
        blocked = tuple(sorted({e.pipe_id for e in scn.blockage_events if e.active(t)})) if with_events else ()
        leaks = tuple(e.leak for e in scn.leak_events if e.active(t)) if with_events else ()
        key = (t, blocked, leaks)
        if cache is not None and not blocked and not leaks and (t, (), ()) in cache:
            out[t] = cache[(t, (), ())]
            continue
        if blocked not in variants:
            v = net
            for pid in blocked:
                v = apply_blockage(v, pid)
            variants[blocked] = v
        mult = scn.demand.multipliers(t, n_nodes, scn.rng_seed)
        try:
            state = solve_steady_state(variants[blocked], leaks, mult)
        except Disconnected as exc:
            raise Disconnected(exc.nodes, step=t) from exc
        except NonConvergence as exc:
            raise NonConvergence(exc.iterations, exc.residual, step=t) from exc
        out[t] = state.pressures[sensor_idx]
        if cache is not None and not blocked and not leaks:
            cache[key] = out[t]
    return out


def _noise(scn: Scenario, tag: int) -> np.ndarray:
    shape = (scn.horizon_steps, len(scn.sensor_nodes))
    if scn.noise_std == 0:
        return np.zeros(shape)
    rng = np.random.default_rng([scn.rng_seed, tag])
    return rng.normal(0.0, scn.noise_std, size=shape)


def generate(scn: Scenario) -> LabeledStream:
    """Simulate ``scn`` step by step and return the noisy labeled sensor stream."""
    return generate_with_history(scn, history=False)[0]


def generate_history(scn: Scenario) -> LabeledStream:
    """Anomaly-free reference year sharing the scenario's demand sub-stream."""
    hist = scn.without_events()
    net = hist.validate()
    clean = _solve_clean(hist, net, with_events=False)
    return _assemble(hist, clean, _HISTORY_NOISE_TAG)


def generate_with_history(scn: Scenario, history: bool = True):
    """Live stream plus (optionally) the event-free reference year.

    Event-free steps are solved once and shared between both streams.
    """
    net = scn.validate()
    cache: dict | None = {} if history else None
    clean = _solve_clean(scn, net, with_events=True, cache=cache)
    live = _assemble(scn, clean, _NOISE_TAG)
    if not history:
        return live, None
    hist_scn = scn.without_events()
    hist_clean = _solve_clean(hist_scn, net, with_events=False, cache=cache)
    return live, _assemble(hist_scn, hist_clean, _HISTORY_NOISE_TAG)


def _assemble(scn: Scenario, clean: np.ndarray, noise_tag: int) -> LabeledStream:
    anomaly, drift = labels(scn)
    return LabeledStream(
        sensor_ids=scn.sensor_nodes,
        pressures=clean + _noise(scn, noise_tag),
        anomaly_label=anomaly,
        drift_label=drift,
        clean=clean,
    )
