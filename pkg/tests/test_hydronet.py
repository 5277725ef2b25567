import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wdnfault.exceptions import Disconnected, NetworkError, UnknownPipe
from wdnfault.hydronet import (
    Junction, LeakSpec, Network, Pipe, Reservoir, apply_blockage, downstream_nodes, hanoi_network,
    leak_flow, load_network, reopen_pipe, save_network, solve_steady_state,
)

from conftest import mass_balance, random_network, single_pipe


def hw_headloss(q, length, diameter, c):
    return 10.667 * length / (c**1.852 * diameter**4.871) * abs(q) ** 1.852 * np.sign(q)


def test_zero_demand_equilibrium():
    s = solve_steady_state(single_pipe(demand=0.0))
    assert s.head("J") == pytest.approx(100.0, abs=1e-12)
    assert s.flow("P") == pytest.approx(0.0, abs=1e-12)


def test_single_pipe_closed_form():
    s = solve_steady_state(single_pipe())
    expected = 100.0 - 10.667 * 1000 / (130**1.852 * 0.3**4.871) * 0.01**1.852
    assert s.flow("P") == pytest.approx(0.01, abs=1e-12)
    assert s.head("J") == pytest.approx(expected, abs=1e-8)
    assert s.residual_norm <= 1e-10


def test_parallel_pipes_symmetric():
    net = Network(
        (Junction("J", 5.0, 0.2),), (Reservoir("R", 80.0),),
        (Pipe("A", "R", "J", 500, 0.4, 120), Pipe("B", "R", "J", 500, 0.4, 120)),
    )
    s = solve_steady_state(net)
    assert abs(s.flow("A") - s.flow("B")) <= 1e-9
    assert s.flow("A") + s.flow("B") == pytest.approx(0.2, abs=1e-10)
    blocked = solve_steady_state(apply_blockage(net, "A"))
    assert blocked.flow("B") == pytest.approx(0.2, abs=1e-10)
    assert blocked.flow("A") == 0.0


def test_reservoir_head_fixed_and_pressure_is_head_minus_elevation():
    net = hanoi_network()
    s = solve_steady_state(net)
    assert s.head("1") == 100.0
    elev = np.array([j.elevation for j in net.junctions])
    np.testing.assert_allclose(s.pressures, s.junction_heads - elev, atol=0)


def test_blocking_only_pipe_disconnects():
    with pytest.raises(Disconnected):
        solve_steady_state(apply_blockage(single_pipe(), "P"))


def test_unknown_pipe():
    with pytest.raises(UnknownPipe):
        apply_blockage(single_pipe(), "nope")


def test_blockage_leaves_original_unchanged_and_reopen_restores():
    net = hanoi_network()
    closed = apply_blockage(net, "7")
    assert net.pipe("7").is_open and not closed.pipe("7").is_open
    a = solve_steady_state(net)
    b = solve_steady_state(reopen_pipe(closed, "7"))
    np.testing.assert_array_equal(a.junction_heads, b.junction_heads)
    np.testing.assert_array_equal(a.pipe_flows, b.pipe_flows)


def test_hanoi_blockage_lowers_downstream_heads():
    net = hanoi_network()
    base = solve_steady_state(net)
    down = downstream_nodes(net, base, "7")
    blocked = solve_steady_state(apply_blockage(net, "7"))
    assert len(down) >= 3
    for n in down:
        assert blocked.head(n) < base.head(n)


def test_hanoi_shape_and_positive_pressures():
    net = hanoi_network()
    assert len(net.junctions) + len(net.reservoirs) == 32 and len(net.pipes) == 34
    for m in (0.55, 1.0, 1.45):
        assert solve_steady_state(net, demand_multiplier=m).pressures.min() > 0


def test_leak_flow_formula():
    leak = LeakSpec("J", 0.02, 0.75)
    expected = 0.75 * math.pi * 0.02**2 / 4 * math.sqrt(2 * 9.81 * 10.0)
    assert leak_flow(10.0, leak) == pytest.approx(expected, rel=1e-14)
    assert leak_flow(-3.0, leak) == 0.0
    assert leak_flow(0.0, leak) == 0.0
    assert leak_flow(50.0, LeakSpec("J", 0.0)) == 0.0


def test_leak_spec_validation():
    with pytest.raises(NetworkError):
        LeakSpec("J", -0.1)
    with pytest.raises(NetworkError):
        LeakSpec("J", 0.1, 1.5)


def test_leak_solve_balances_orifice_law():
    net = hanoi_network()
    leak = LeakSpec("14", 0.089)
    s = solve_steady_state(net, [leak])
    assert s.leak_outflows["14"] == pytest.approx(leak_flow(s.pressure("14"), leak), rel=1e-9)
    assert np.abs(mass_balance(net, s, [leak])).max() <= 1e-6
    assert s.pressure("14") < solve_steady_state(net).pressure("14")


def test_leak_clamps_at_negative_pressure():
    # junction sits above the reservoir level, so pressure is negative and the leak is dry
    net = Network((Junction("J", 150.0, 0.01),), (Reservoir("R", 100.0),), (Pipe("P", "R", "J", 100, 0.3, 130),))
    s = solve_steady_state(net, [LeakSpec("J", 0.05)])
    assert s.pressure("J") < 0
    assert s.leak_outflows["J"] == 0.0


def test_network_validation():
    with pytest.raises(NetworkError):
        Network((Junction("J", 0, 0.1),), (), ())
    with pytest.raises(NetworkError):
        Network((Junction("J", 0, 0.1),), (Reservoir("R", 10),), (Pipe("P", "R", "J", 100, 0.3, 200),))
    with pytest.raises(NetworkError):
        Network((Junction("J", 0, 0.1),), (Reservoir("R", 10),), (Pipe("P", "J", "J", 100, 0.3, 100),))
    with pytest.raises(NetworkError):
        Network((Junction("J", 0, -1),), (Reservoir("R", 10),), (Pipe("P", "R", "J", 100, 0.3, 100),))
    with pytest.raises(NetworkError):
        Network((Junction("J", 0, 0.1), Junction("K", 0, 0.1)), (Reservoir("R", 10),),
                (Pipe("P", "R", "J", 100, 0.3, 100),))


def test_json_roundtrip(tmp_path):
    net = hanoi_network()
    save_network(net, tmp_path / "net.json")
    again = load_network(tmp_path / "net.json")
    assert again == net
    raw = json.loads((tmp_path / "net.json").read_text())
    assert set(raw) >= {"junctions", "reservoirs", "pipes"}
    assert set(raw["pipes"][0]) >= {"id", "start", "end", "length", "diameter", "roughness", "status"}


def test_deterministic():
    net = hanoi_network()
    a = solve_steady_state(net, [LeakSpec("14", 0.05)], 1.2)
    b = solve_steady_state(net, [LeakSpec("14", 0.05)], 1.2)
    assert a.junction_heads.tobytes() == b.junction_heads.tobytes()


@given(st.integers(0, 2**32 - 1), st.integers(1, 39), st.integers(0, 15), st.integers(1, 2))
def test_fuzz_mass_balance(seed, n, extra, n_res):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, extra, n_res)
    leaks = [LeakSpec(net.junctions[0].id, 0.03)]
    mult = rng.uniform(0.5, 1.5, n)
    s = solve_steady_state(net, leaks, mult)
    assert np.abs(mass_balance(net, s, leaks, mult)).max() <= 1e-6
    assert s.residual_norm <= 1e-6


@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(0, 10))
def test_fuzz_demand_monotonicity(seed, n, extra):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, extra)
    mult = np.ones(n)
    base = solve_steady_state(net, (), mult)
    k = int(rng.integers(0, n))
    mult[k] = 1.5
    more = solve_steady_state(net, (), mult)
    assert np.all(more.junction_heads <= base.junction_heads + 1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(0, 10))
def test_nodal_fallback_agrees_with_primary(seed, n, extra):
    from wdnfault.hydronet import _compile, _nodal_newton

    rng = np.random.default_rng(seed)
    net = random_network(rng, n, extra)
    leaks = [LeakSpec(net.junctions[-1].id, 0.02)]
    mult = rng.uniform(0.5, 1.5, n)
    ref = solve_steady_state(net, leaks, mult)
    topo = _compile(net)
    demand = topo.base_demand * mult
    K = np.zeros(n)
    K[-1] = leaks[0].orifice_constant
    q, h = _nodal_newton(topo, K, demand, 1e-10, 200, 20)
    np.testing.assert_allclose(h, ref.junction_heads, atol=1e-4)
    np.testing.assert_allclose(q, ref.pipe_flows[topo.open_idx], atol=1e-8)


def test_uneven_resistances_converge():
    # a very thin long pipe next to a wide short one stalls plain damped Newton
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        net = random_network(rng, n, int(rng.integers(0, 12)), int(rng.integers(1, 3)))
        leaks = [LeakSpec(net.junctions[int(rng.integers(n))].id, float(rng.uniform(0, 0.05)))]
        mult = rng.uniform(0.5, 1.5, n)
        s = solve_steady_state(net, leaks, mult)
        assert np.abs(mass_balance(net, s, leaks, mult)).max() <= 1e-6
