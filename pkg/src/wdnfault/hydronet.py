"""Steady-state hydraulics for looped pipe networks.

Hazen-Williams head loss, pressure-dependent orifice leaks and pipe closures.
The solver is a Newton iteration on (pipe flows, junction heads) in the
global-gradient arrangement: each step eliminates the flow corrections and
solves a symmetric positive definite system for the junction head
corrections.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import Disconnected, NetworkError, NonConvergence, UnknownPipe

GRAVITY = 9.81
HW_EXPONENT = 1.852
HW_COEFFICIENT = 10.667
DEFAULT_DISCHARGE_COEFFICIENT = 0.75

# below this head loss the pipe law is linear (avoids dq/dh -> inf at q=0)
_LINEAR_HEADLOSS = 1e-8
# same idea for the orifice law near zero pressure
_LINEAR_PRESSURE = 1e-10


@dataclass(frozen=True)
class Junction:
    id: str
    elevation: float
    base_demand: float


@dataclass(frozen=True)
class Reservoir:
    id: str
    fixed_head: float


@dataclass(frozen=True)
class Pipe:
    id: str
    start: str
    end: str
    length: float
    diameter: float
    roughness: float
    status: str = "open"

    @property
    def is_open(self) -> bool:
        return self.status == "open"

    @property
    def resistance(self) -> float:
        """Hazen-Williams resistance r in h_f = r |q|^0.852 q (SI)."""
        return HW_COEFFICIENT * self.length / (
            self.roughness**HW_EXPONENT * self.diameter**4.871
        )


@dataclass(frozen=True)
class LeakSpec:
    node_id: str
    hole_diameter: float
    discharge_coefficient: float = DEFAULT_DISCHARGE_COEFFICIENT

    def __post_init__(self):
        if not self.hole_diameter >= 0:
            raise NetworkError(f"leak hole diameter must be >= 0, got {self.hole_diameter}")
        if not 0 < self.discharge_coefficient <= 1:
            raise NetworkError(
                f"discharge coefficient must lie in (0, 1], got {self.discharge_coefficient}"
            )

    @property
    def orifice_constant(self) -> float:
        """K such that q = K * sqrt(p)."""
        area = math.pi * self.hole_diameter**2 / 4.0
        return self.discharge_coefficient * area * math.sqrt(2.0 * GRAVITY)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "hole_diameter": self.hole_diameter,
            "discharge_coefficient": self.discharge_coefficient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LeakSpec":
        return cls(
            node_id=str(d["node_id"]),
            hole_diameter=float(d["hole_diameter"]),
            discharge_coefficient=float(
                d.get("discharge_coefficient", DEFAULT_DISCHARGE_COEFFICIENT)
            ),
        )


@dataclass(frozen=True)
class Network:
    junctions: tuple[Junction, ...]
    reservoirs: tuple[Reservoir, ...]
    pipes: tuple[Pipe, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "junctions", tuple(self.junctions))
        object.__setattr__(self, "reservoirs", tuple(self.reservoirs))
        object.__setattr__(self, "pipes", tuple(self.pipes))
        self._validate()

    def _validate(self):
        if not self.reservoirs:
            raise NetworkError("network needs at least one reservoir")
        ids = [n.id for n in self.junctions] + [r.id for r in self.reservoirs]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate node ids")
        pipe_ids = [p.id for p in self.pipes]
        if len(set(pipe_ids)) != len(pipe_ids):
            raise NetworkError("duplicate pipe ids")
        for j in self.junctions:
            if not (j.base_demand >= 0 and math.isfinite(j.base_demand)):
                raise NetworkError(f"junction {j.id}: demand must be >= 0")
            if not math.isfinite(j.elevation):
                raise NetworkError(f"junction {j.id}: elevation must be finite")
        for r in self.reservoirs:
            if not math.isfinite(r.fixed_head):
                raise NetworkError(f"reservoir {r.id}: head must be finite")
        known = set(ids)
        for p in self.pipes:
            if p.start not in known or p.end not in known:
                raise NetworkError(f"pipe {p.id} references an unknown node")
            if p.start == p.end:
                raise NetworkError(f"pipe {p.id} is a self-loop")
            if not (p.length > 0 and p.diameter > 0):
                raise NetworkError(f"pipe {p.id}: length and diameter must be > 0")
            if not 50 <= p.roughness <= 160:
                raise NetworkError(f"pipe {p.id}: roughness C must lie in [50, 160]")
            if p.status not in ("open", "closed"):
                raise NetworkError(f"pipe {p.id}: status must be 'open' or 'closed'")
        unreached = _unreached_nodes(self, include_closed=True)
        if unreached:
            raise NetworkError(f"network is not connected; unreachable: {sorted(unreached)}")

    @property
    def junction_ids(self) -> list[str]:
        return [j.id for j in self.junctions]

    @property
    def pipe_ids(self) -> list[str]:
        return [p.id for p in self.pipes]

    def pipe(self, pipe_id: str) -> Pipe:
        for p in self.pipes:
            if p.id == pipe_id:
                return p
        raise UnknownPipe(pipe_id)

    def junction(self, node_id: str) -> Junction:
        for j in self.junctions:
            if j.id == node_id:
                return j
        raise KeyError(node_id)

    def with_pipe_status(self, pipe_id: str, status: str) -> "Network":
        pipe_id = str(pipe_id)
        self.pipe(pipe_id)
        pipes = tuple(replace(p, status=status) if p.id == pipe_id else p for p in self.pipes)
        return replace(self, pipes=pipes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "junctions": [
                {"id": j.id, "elevation": j.elevation, "base_demand": j.base_demand}
                for j in self.junctions
            ],
            "reservoirs": [{"id": r.id, "fixed_head": r.fixed_head} for r in self.reservoirs],
            "pipes": [
                {
                    "id": p.id,
                    "start": p.start,
                    "end": p.end,
                    "length": p.length,
                    "diameter": p.diameter,
                    "roughness": p.roughness,
                    "status": p.status,
                }
                for p in self.pipes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        try:
            junctions = [
                Junction(str(j["id"]), float(j.get("elevation", 0.0)), float(j.get("base_demand", 0.0)))
                for j in d["junctions"]
            ]
            reservoirs = [Reservoir(str(r["id"]), float(r["fixed_head"])) for r in d["reservoirs"]]
            pipes = [
                Pipe(
                    str(p["id"]),
                    str(p["start"]),
                    str(p["end"]),
                    float(p["length"]),
                    float(p["diameter"]),
                    float(p["roughness"]),
                    str(p.get("status", "open")),
                )
                for p in d["pipes"]
            ]
        except (KeyError, TypeError) as exc:
            raise NetworkError(f"malformed network description: {exc!r}") from exc
        return cls(junctions, reservoirs, pipes, name=str(d.get("name", "")))


def load_network(path) -> Network:
    with open(path) as fh:
        return Network.from_dict(json.load(fh))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1))


def hanoi_network() -> Network:
    """The bundled Hanoi-like benchmark topology (31 junctions, 1 reservoir, 34 pipes)."""
    text = resources.files("wdnfault.data").joinpath("hanoi_like.json").read_text()
    return Network.from_dict(json.loads(text))


def _unreached_nodes(net: Network, include_closed: bool = False) -> set[str]:
    adj: dict[str, list[str]] = {}
    for p in net.pipes:
        if include_closed or p.is_open:
            adj.setdefault(p.start, []).append(p.end)
            adj.setdefault(p.end, []).append(p.start)
    seen = {r.id for r in net.reservoirs}
    stack = list(seen)
    while stack:
        n = stack.pop()
        for m in adj.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return {j.id for j in net.junctions} - seen


def apply_blockage(net: Network, pipe_id) -> Network:
    """Return a copy of ``net`` with ``pipe_id`` closed."""
    return net.with_pipe_status(pipe_id, "closed")


def reopen_pipe(net: Network, pipe_id) -> Network:
    return net.with_pipe_status(pipe_id, "open")


def leak_flow(pressure_head: float, leak: LeakSpec) -> float:
    """Orifice outflow [m3/s] for a given pressure head [m]; zero when p <= 0."""
    return leak.orifice_constant * math.sqrt(max(pressure_head, 0.0))


@dataclass(frozen=True)
class HydraulicState:
    junction_ids: tuple[str, ...]
    reservoir_ids: tuple[str, ...]
    junction_heads: np.ndarray
    reservoir_heads: np.ndarray
    pressures: np.ndarray
    pipe_ids: tuple[str, ...]
    pipe_flows: np.ndarray
    leak_outflows: dict
    residual_norm: float
    iterations: int

    @property
    def node_heads(self) -> dict:
        heads = dict(zip(self.junction_ids, self.junction_heads.tolist()))
        heads.update(zip(self.reservoir_ids, self.reservoir_heads.tolist()))
        return heads

    def head(self, node_id: str) -> float:
        return self.node_heads[node_id]

    def pressure(self, node_id: str) -> float:
        return float(self.pressures[self.junction_ids.index(node_id)])

    def flow(self, pipe_id: str) -> float:
        return float(self.pipe_flows[self.pipe_ids.index(pipe_id)])


class _Topology:
    """Index arrays for the open part of a network."""

    def __init__(self, net: Network):
        unreached = _unreached_nodes(net)
        if unreached:
            raise Disconnected(sorted(unreached))
        self.junction_ids = tuple(j.id for j in net.junctions)
        self.reservoir_ids = tuple(r.id for r in net.reservoirs)
        jindex = {jid: i for i, jid in enumerate(self.junction_ids)}
        rindex = {rid: i for i, rid in enumerate(self.reservoir_ids)}
        self.elevation = np.array([j.elevation for j in net.junctions], dtype=float)
        self.base_demand = np.array([j.base_demand for j in net.junctions], dtype=float)
        self.reservoir_heads = np.array([r.fixed_head for r in net.reservoirs], dtype=float)
        self.pipe_ids = tuple(p.id for p in net.pipes)
        self.open_idx = np.array([k for k, p in enumerate(net.pipes) if p.is_open], dtype=int)
        open_pipes = [net.pipes[k] for k in self.open_idx]
        n_open, nj = len(open_pipes), len(self.junction_ids)
        # A12[k, i] = +1 if junction i is the start of pipe k, -1 if it is the end
        A12 = np.zeros((n_open, nj))
        fixed = np.zeros(n_open)
        for k, p in enumerate(open_pipes):
            for node, sign in ((p.start, 1.0), (p.end, -1.0)):
                if node in jindex:
                    A12[k, jindex[node]] = sign
                else:
                    fixed[k] += sign * self.reservoir_heads[rindex[node]]
        self.A12 = A12
        self.fixed_drop = fixed
        self.r = np.array([p.resistance for p in open_pipes])
        self.q_lin = (_LINEAR_HEADLOSS / self.r) ** (1.0 / HW_EXPONENT)
        self.r_lin = _LINEAR_HEADLOSS / self.q_lin
        self.q_init = np.array([math.pi * p.diameter**2 / 4.0 for p in open_pipes])
        self.h_init = np.full(nj, self.reservoir_heads.max())
        self.jindex = jindex


@lru_cache(maxsize=128)
def _compile(net: Network) -> _Topology:
    return _Topology(net)


def _headloss(topo: _Topology, q: np.ndarray):
    aq = np.abs(q)
    lin = aq < topo.q_lin
    safe = np.where(lin, topo.q_lin, aq)
    grad_nl = topo.r * safe**0.852
    hf = np.where(lin, topo.r_lin * q, grad_nl * q)
    dhf = np.where(lin, topo.r_lin, HW_EXPONENT * grad_nl)
    return hf, dhf


def _leak(K: np.ndarray, p: np.ndarray):
    pos = np.maximum(p, 0.0)
    lin = pos < _LINEAR_PRESSURE
    root = np.sqrt(np.where(lin, _LINEAR_PRESSURE, pos))
    flow = np.where(lin, K * pos / math.sqrt(_LINEAR_PRESSURE), K * root)
    dflow = np.where(p <= 0, 0.0, np.where(lin, K / math.sqrt(_LINEAR_PRESSURE), K / (2 * root)))
    return flow, dflow


def _pipe_flow(topo: _Topology, g: np.ndarray):
    """Inverse of the regularized head-loss law: flow and d(flow)/d(drop) for head drops ``g``."""
    ag = np.abs(g)
    lin = ag < _LINEAR_HEADLOSS
    safe = np.where(lin, _LINEAR_HEADLOSS, ag)
    q_nl = (safe / topo.r) ** (1.0 / HW_EXPONENT)
    q = np.where(lin, g / topo.r_lin, np.sign(g) * q_nl)
    dq = np.where(lin, 1.0 / topo.r_lin, q_nl / (HW_EXPONENT * safe))
    return q, dq


def _pipe_content(topo: _Topology, g: np.ndarray) -> np.ndarray:
    """Antiderivative of :func:`_pipe_flow` in the head drop (convex, even)."""
    ag = np.abs(g)
    g0 = _LINEAR_HEADLOSS
    e = 1.0 / HW_EXPONENT + 1.0
    lin_part = np.minimum(ag, g0) ** 2 / (2.0 * topo.r_lin)
    nl = np.maximum(ag, g0)
    return lin_part + topo.r ** (-1.0 / HW_EXPONENT) * (nl**e - g0**e) / e


def _leak_content(K: np.ndarray, p: np.ndarray) -> np.ndarray:
    pos = np.maximum(p, 0.0)
    p0 = _LINEAR_PRESSURE
    lin_part = K * np.minimum(pos, p0) ** 2 / (2.0 * math.sqrt(p0))
    nl = np.maximum(pos, p0)
    return lin_part + K * (2.0 / 3.0) * (nl**1.5 - p0**1.5)


def _nodal_newton(topo: _Topology, K, demand, tol, max_iter, max_halvings):
    """Fallback solve over junction heads alone.

    The junction mass residual is the gradient of a convex function of the
    heads, so Newton steps with Armijo backtracking on that function converge
    where the flow/head iteration stalls (very uneven pipe resistances).
    """
    A12 = topo.A12
    nj = A12.shape[1]

    def objective(h):
        g = A12 @ h + topo.fixed_drop
        return (_pipe_content(topo, g).sum() + demand @ h
                + _leak_content(K, h - topo.elevation).sum())

    def gradient(h):
        q, dq = _pipe_flow(topo, A12 @ h + topo.fixed_drop)
        lk, dlk = _leak(K, h - topo.elevation)
        return q, A12.T @ q + demand + lk, dq, dlk

    h = topo.h_init.copy()
    f = objective(h)
    q, mass, dq, dlk = gradient(h)
    for it in range(1, 5 * max_iter + 1):
        if np.abs(mass).max(initial=0.0) <= tol:
            return q, h
        jac = (A12.T * dq) @ A12
        jac[np.diag_indices(nj)] += dlk
        step_dir = -np.linalg.solve(jac, mass)
        slope = float(mass @ step_dir)
        t = 1.0
        # below rounding level of the objective the decrease test is meaningless;
        # this close to the solution the full step is taken
        tiny = -slope <= 1e-12 * (1.0 + abs(f))
        for _ in range(0 if tiny else 4 * max_halvings):
            h_try = h + t * step_dir
            f_try = objective(h_try)
            if f_try <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        if tiny:
            h_try = h + step_dir
            f_try = objective(h_try)
        h, f = h_try, f_try
        q, mass, dq, dlk = gradient(h)
        if not np.isfinite(f):
            break
    raise NonConvergence(5 * max_iter, float(np.abs(mass).max(initial=0.0)))


def solve_steady_state(
    net: Network,
    leaks: Iterable[LeakSpec] = (),
    demand_multiplier=1.0,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    max_halvings: int = 20,
) -> HydraulicState:
    """Solve the demand-driven steady state of ``net``.

    ``demand_multiplier`` is a scalar or one value per junction (network order).
    Raises :class:`Disconnected` when an open path to a reservoir is missing and
    :class:`NonConvergence` when the residual does not fall below ``tol``.
    """
    topo = _compile(net)
    nj = len(topo.junction_ids)
    mult = np.broadcast_to(np.asarray(demand_multiplier, dtype=float), (nj,))
    demand = topo.base_demand * mult
    K = np.zeros(nj)
    leaks = tuple(leaks)
    for leak in leaks:
        if leak.node_id not in topo.jindex:
            raise NetworkError(f"leak at unknown junction {leak.node_id}")
        K[topo.jindex[leak.node_id]] += leak.orifice_constant

    A12 = topo.A12
    A21 = A12.T
    q = topo.q_init.copy()
    h = topo.h_init.copy()

    def residuals(q, h):
        hf, dhf = _headloss(topo, q)
        lk, dlk = _leak(K, h - topo.elevation)
        energy = hf - A12 @ h - topo.fixed_drop
        mass = A21 @ q + demand + lk
        return energy, mass, dhf, dlk

    energy, mass, dhf, dlk = residuals(q, h)
    norm = math.sqrt(energy @ energy + mass @ mass)
    it = 0
    while it < max_iter:
        if np.abs(mass).max(initial=0.0) <= tol and np.abs(energy).max(initial=0.0) <= tol:
            break
        it += 1
        inv_d = 1.0 / dhf
        lhs = (A21 * inv_d) @ A12
        lhs[np.diag_indices(nj)] += dlk
        rhs = A21 @ (inv_d * energy) - mass
        dh = np.linalg.solve(lhs, rhs)
        dq = inv_d * (A12 @ dh - energy)
        step = 1.0
        for _ in range(max_halvings + 1):
            q_try, h_try = q + step * dq, h + step * dh
            trial = residuals(q_try, h_try)
            t_norm = math.sqrt(trial[0] @ trial[0] + trial[1] @ trial[1])
            if t_norm < norm:
                break
            step *= 0.5
        else:
            # no halving reduced the residual; take the full Newton step
            q_try, h_try = q + dq, h + dh
            trial = residuals(q_try, h_try)
            t_norm = math.sqrt(trial[0] @ trial[0] + trial[1] @ trial[1])
        q, h = q_try, h_try
        energy, mass, dhf, dlk = trial
        norm = t_norm
        if not np.isfinite(norm):
            q, h = _nodal_newton(topo, K, demand, tol, max_iter, max_halvings)
            break
    else:
        if not (np.abs(mass).max(initial=0.0) <= tol and np.abs(energy).max(initial=0.0) <= tol):
            q, h = _nodal_newton(topo, K, demand, tol, max_iter, max_halvings)

    pressures = h - topo.elevation
    leak_out = {}
    exact_leak = np.zeros(nj)
    for leak in leaks:
        i = topo.jindex[leak.node_id]
        flow = leak_flow(float(pressures[i]), leak)
        leak_out[leak.node_id] = leak_out.get(leak.node_id, 0.0) + flow
        exact_leak[i] += flow
    balance = A21 @ q + demand + exact_leak
    flows = np.zeros(len(topo.pipe_ids))
    flows[topo.open_idx] = q
    return HydraulicState(
        junction_ids=topo.junction_ids,
        reservoir_ids=topo.reservoir_ids,
        junction_heads=h,
        reservoir_heads=topo.reservoir_heads.copy(),
        pressures=pressures,
        pipe_ids=topo.pipe_ids,
        pipe_flows=flows,
        leak_outflows=leak_out,
        residual_norm=float(np.abs(balance).max(initial=0.0)),
        iterations=it,
    )


def downstream_nodes(net: Network, state: HydraulicState, pipe_id: str) -> set[str]:
    """Junctions reached by following the flow direction out of ``pipe_id``."""
    pipe = net.pipe(pipe_id)
    q = state.flow(pipe_id)
    head_node = pipe.end if q >= 0 else pipe.start
    succ: dict[str, list[str]] = {}
    for p, f in zip(net.pipes, state.pipe_flows):
        if not p.is_open or f == 0:
            continue
        a, b = (p.start, p.end) if f > 0 else (p.end, p.start)
        succ.setdefault(a, []).append(b)
    junctions = set(state.junction_ids)
    seen = {head_node}
    stack = [head_node]
    while stack:
        n = stack.pop()
        for m in succ.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen & junctions


def sensor_pressures(state: HydraulicState, node_ids: Sequence[str]) -> np.ndarray:
    idx = [state.junction_ids.index(n) for n in node_ids]
    return state.pressures[idx]
