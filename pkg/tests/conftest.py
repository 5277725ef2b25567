import numpy as np
import pytest
from hypothesis import settings

from wdnfault.hydronet import Junction, Network, Pipe, Reservoir

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_network(rng: np.random.Generator, n_junctions: int, extra_pipes: int, n_reservoirs: int = 1) -> Network:
    """Connected random network: random spanning tree plus ``extra_pipes`` loop-closing pipes."""
    res = [Reservoir(f"R{i}", float(rng.uniform(60, 120))) for i in range(n_reservoirs)]
    junc = [Junction(f"J{i}", float(rng.uniform(0, 30)), float(rng.uniform(0, 0.05))) for i in range(n_junctions)]
    nodes = [r.id for r in res] + [j.id for j in junc]
    pipes = []

    def pipe(a, b):
        pipes.append(Pipe(f"P{len(pipes)}", a, b, float(rng.uniform(50, 2000)),
                          float(rng.uniform(0.1, 1.0)), float(rng.uniform(80, 150))))

    for k in range(n_reservoirs, len(nodes)):
        pipe(nodes[int(rng.integers(0, k))], nodes[k])
    for _ in range(extra_pipes):
        a, b = rng.choice(len(nodes), size=2, replace=False)
        pipe(nodes[a], nodes[b])
    return Network(tuple(junc), tuple(res), tuple(pipes))


def mass_balance(net: Network, state, leaks=(), multiplier=1.0) -> np.ndarray:
    """Per-junction inflow - outflow - demand - leak, computed from scratch."""
    idx = {j: i for i, j in enumerate(state.junction_ids)}
    mult = np.broadcast_to(np.asarray(multiplier, dtype=float), (len(idx),))
    bal = np.array([-j.base_demand * m for j, m in zip(net.junctions, mult)])
    for p, q in zip(net.pipes, state.pipe_flows):
        if not p.is_open:
            continue
        if p.start in idx:
            bal[idx[p.start]] -= q
        if p.end in idx:
            bal[idx[p.end]] += q
    for node, q in state.leak_outflows.items():
        bal[idx[node]] -= q
    return bal


def single_pipe(demand=0.01, length=1000.0, diameter=0.3, c=130.0, head=100.0):
    return Network(
        (Junction("J", 0.0, demand),),
        (Reservoir("R", head),),
        (Pipe("P", "R", "J", length, diameter, c),),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
