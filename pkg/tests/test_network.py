import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhnagm import (Constants, Pipe, build_network, pipe_kernel_params, simulate, steady_state,
                    trace_flow_fractions)
from dhnagm.errors import (ConfigError, DanglingReference, DuplicateId, HorizonTooShort,
                           MassImbalance, NonTreeRouting, ZeroMassFlow)
from dhnagm.synthetic import random_tree_config

from conftest import single_pipe_config, two_source_config


def test_minimal_network_is_valid():
    net = build_network(single_pipe_config())
    assert net.sources == ("S1",)
    assert net.loads == ("L1",)
    assert net.path("S1", "L1") == ("P1",)


def test_junction_imbalance_rejected():
    cfg = {
        "nodes": [
            {"id": "S1", "kind": "source", "mass_flow_kg_s": 10.0},
            {"id": "J1", "kind": "junction"},
            {"id": "L1", "kind": "load", "mass_flow_kg_s": 8.0},
        ],
        "pipes": [
            {"id": "P1", "from": "S1", "to": "J1", "length_m": 10, "area_m2": 0.01,
             "lambda_kw_per_m_c": 0.0, "mass_flow_kg_s": 10.0},
            {"id": "P2", "from": "J1", "to": "L1", "length_m": 10, "area_m2": 0.01,
             "lambda_kw_per_m_c": 0.0, "mass_flow_kg_s": 8.0},
        ],
    }
    with pytest.raises(MassImbalance) as exc:
        build_network(cfg)
    assert exc.value.node in ("S1", "J1")


def test_diamond_routing_rejected():
    pipe = dict(length_m=10, area_m2=0.01, lambda_kw_per_m_c=0.0)
    cfg = {
        "nodes": [
            {"id": "S1", "kind": "source", "mass_flow_kg_s": 10.0},
            {"id": "A", "kind": "junction"},
            {"id": "B", "kind": "junction"},
            {"id": "L1", "kind": "load", "mass_flow_kg_s": 10.0},
        ],
        "pipes": [
            {"id": "P1", "from": "S1", "to": "A", "mass_flow_kg_s": 5.0, **pipe},
            {"id": "P2", "from": "S1", "to": "B", "mass_flow_kg_s": 5.0, **pipe},
            {"id": "P3", "from": "A", "to": "L1", "mass_flow_kg_s": 5.0, **pipe},
            {"id": "P4", "from": "B", "to": "L1", "mass_flow_kg_s": 5.0, **pipe},
        ],
    }
    with pytest.raises(NonTreeRouting):
        build_network(cfg)


def test_bad_references_and_ids():
    cfg = single_pipe_config()
    cfg["pipes"][0]["to"] = "nowhere"
    with pytest.raises(DanglingReference):
        build_network(cfg)
    cfg = single_pipe_config()
    cfg["nodes"].append(dict(cfg["nodes"][0]))
    with pytest.raises(DuplicateId):
        build_network(cfg)
    cfg = single_pipe_config()
    cfg["pipes"][0]["mass_flow_kg_s"] = 0.0
    with pytest.raises(ConfigError):
        build_network(cfg)


def test_time_varying_flow_rejected():
    cfg = single_pipe_config()
    cfg["pipes"][0]["mass_flow_kg_s"] = [50.0, 40.0]
    with pytest.raises(ConfigError, match="time-varying"):
        build_network(cfg)


def test_pipe_params_integer_transit():
    pipe = Pipe("P", "a", "b", length=100.0, area=0.1, loss_coeff=0.0, mass_flow=100.0)
    kp = pipe_kernel_params(pipe, Constants(dt=100.0))
    assert (kp.gamma, kp.alpha, kp.eta) == (1, 1.0, 0.0)


def test_pipe_params_half_step():
    pipe = Pipe("P", "a", "b", length=100.0, area=0.1, loss_coeff=0.0, mass_flow=100.0)
    kp = pipe_kernel_params(pipe, Constants(dt=100.0 / 1.5))
    assert kp.gamma == 1
    assert kp.alpha == pytest.approx(0.5, abs=1e-12)


def test_pipe_loss_fraction():
    pipe = Pipe("P", "a", "b", length=1000.0, area=0.1, loss_coeff=0.02, mass_flow=50.0)
    kp = pipe_kernel_params(pipe, Constants())
    assert kp.eta == pytest.approx(1 - math.exp(-20 / 210), rel=1e-14)
    assert kp.eta == pytest.approx(0.0908, abs=5e-5)


def test_pipe_zero_flow():
    pipe = Pipe("P", "a", "b", length=1.0, area=0.1, loss_coeff=0.0, mass_flow=0.0)
    with pytest.raises(ZeroMassFlow):
        pipe_kernel_params(pipe, Constants())


def test_single_source_fractions(seven_node, six_node):
    flows = trace_flow_fractions(six_node)
    np.testing.assert_array_equal(flows.xi_s, np.ones((1, 3)))


def test_two_source_fractions(two_source):
    flows = trace_flow_fractions(two_source)
    np.testing.assert_allclose(flows.xi_s[:, 0], [0.6, 0.4], atol=1e-15)


@pytest.mark.parametrize("seed", range(8))
def test_fractions_partition_of_unity(seed):
    net = build_network(random_tree_config(seed, n_sources=3, n_loads=7))
    flows = trace_flow_fractions(net)
    np.testing.assert_allclose(flows.xi_s.sum(axis=0), 1.0, atol=1e-14)
    np.testing.assert_allclose(flows.xi_r.sum(axis=1), 1.0, atol=1e-14)
    # every load's withdrawal is split among sources, every source's return among loads
    m_src = np.array([net.node(k).mass_flow for k in net.sources])
    np.testing.assert_allclose(flows.load_pair_flows.sum(axis=1), m_src, rtol=1e-12)


def test_pure_delay_step():
    # transit 1000 * 0.1 * 720 / 10 = 7200 s, two steps
    net = build_network(single_pipe_config(length=720.0, area=0.1, m=10.0, dt=3600.0))
    kp = net.kernel_params["P1"]
    assert (kp.gamma, kp.alpha, kp.eta) == (2, 1.0, 0.0)
    out = simulate(net, np.ones((8, 1)), np.zeros((8, 1)), initial_temp=0.0)
    np.testing.assert_array_equal(out.series("L1", "supply"), [0, 0, 1, 1, 1, 1, 1, 1])


def test_steady_state_with_loss():
    m, L = 50.0, 1000.0
    lam = -math.log(0.81) * 4.2 * m / L
    net = build_network(single_pipe_config(length=L, lam=lam, m=m))
    assert net.kernel_params["P1"].eta == pytest.approx(0.19, abs=1e-14)
    sup, _ = steady_state(net, [80.0], [40.0])
    assert sup["L1"] == pytest.approx(64.8, abs=1e-12)
    out = simulate(net, np.full((10, 1), 80.0), np.full((10, 1), 40.0), initial_temp=80.0)
    np.testing.assert_allclose(out.series("L1", "supply"), 64.8, atol=1e-12)


def test_ambient_fixed_point(seven_node):
    amb = seven_node.constants.tau_amb
    T = 30
    out = simulate(seven_node, np.full((T, 2), amb), np.full((T, len(seven_node.loads)), amb))
    for series in out.channels.values():
        np.testing.assert_allclose(series, amb, atol=1e-12)


def test_horizon_guard(six_node):
    with pytest.raises(HorizonTooShort):
        simulate(six_node, np.ones((3, 1)), np.ones((3, 3)), horizon=5)


def test_mapping_inputs_match_arrays(seven_node, rng):
    T = 20
    src = rng.uniform(70, 90, (T, 2))
    ret = rng.uniform(30, 50, (T, len(seven_node.loads)))
    a = simulate(seven_node, src, ret)
    b = simulate(seven_node, dict(zip(seven_node.sources, src.T)), dict(zip(seven_node.loads, ret.T)))
    for key in a.channels:
        np.testing.assert_array_equal(a.channels[key], b.channels[key])


def test_config_round_trip(seven_node):
    again = build_network(seven_node.to_config())
    assert again.kernel_params == seven_node.kernel_params
    assert again.paths == seven_node.paths


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-20, 120), seed=st.integers(0, 10_000))
def test_constant_fixed_point_property(c, seed):
    cfg = random_tree_config(seed, n_sources=2, n_loads=4, tau_amb=c)
    net = build_network(cfg)
    T = 15
    out = simulate(net, np.full((T, 2), c), np.full((T, 4), c), initial_temp=c)
    for series in out.channels.values():
        np.testing.assert_allclose(series, c, atol=1e-10 * max(1.0, abs(c)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_simulation_linearity(seed, a, b):
    # with zero ambient and zero initial state the node method is linear
    cfg = random_tree_config(seed, n_sources=2, n_loads=5, tau_amb=0.0)
    net = build_network(cfg)
    rng = np.random.default_rng(seed)
    T = 25
    x1, x2 = rng.normal(size=(T, 2)), rng.normal(size=(T, 2))
    r1, r2 = rng.normal(size=(T, 5)), rng.normal(size=(T, 5))
    o1 = simulate(net, x1, r1, initial_temp=0.0)
    o2 = simulate(net, x2, r2, initial_temp=0.0)
    o = simulate(net, a * x1 + b * x2, a * r1 + b * r2, initial_temp=0.0)
    for key in o.channels:
        np.testing.assert_allclose(o.channels[key], a * o1.channels[key] + b * o2.channels[key],
                                   atol=1e-11)
