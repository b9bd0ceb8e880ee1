import json
import math

import numpy as np
import pytest
import scipy.sparse as sp

from dhnagm import (ChpParams, DispatchScenario, TemperatureBounds, build_dispatch, build_network,
                    compare_models, derive_agm, solve_dispatch, solve_qp, truncate_agm)
from dhnagm.dispatch import (SHARED_BLOCKS, default_scenario, load_scenario, scenario_from_dict,
                             scenario_to_dict, solution_to_dict, write_schedule_csv)
from dhnagm.errors import ConfigError, Infeasible, InfeasibleBounds

from conftest import single_pipe_config

CW = 4.2


def one_step_pipe(eta, m=50.0, tau_amb=0.0):
    # transit 1000 * 0.1 * 1800 / 50 = 3600 s: a pure one-step delay
    lam = -math.log(1 - eta) * CW * m / 1800.0
    return build_network(single_pipe_config(length=1800.0, area=0.1, lam=lam, m=m, tau_amb=tau_amb))


def test_zero_demand_costs_nothing():
    net = one_step_pipe(0.0)
    chp = ChpParams(c2=1e-4, c1=0.0, c0=0.0)
    bounds = TemperatureBounds(return_max=120.0)
    for model in (net, derive_agm(net)):
        sc = DispatchScenario({"L1": np.zeros(12)}, chp=chp, bounds=bounds,
                              history_supply=70.0, history_return=70.0)
        sol = solve_dispatch(build_dispatch(model, sc, net.constants))
        assert abs(sol.objective) <= 1e-6
        np.testing.assert_allclose(sol.schedules["heat"], 0.0, atol=1e-5)


def test_single_pipe_steady_optimum():
    eta, m, H = 0.05, 50.0, 12
    net = one_step_pipe(eta, m)
    cm = CW * m
    # with these bounds the source minimum binds: load supply 66.5, return 45
    demand = cm * (70.0 * (1 - eta) - 45.0)
    heat = cm * (70.0 - (1 - eta) * 45.0)
    chp = ChpParams()
    expect = H * (chp.c2 * heat ** 2 + chp.c1 * heat + chp.c0)
    sc = DispatchScenario({"L1": np.full(H, demand)}, chp=chp, history_supply=70.0,
                          history_return=45.0)
    for model in (net, derive_agm(net)):
        sol = solve_dispatch(build_dispatch(model, sc, net.constants))
        assert sol.objective == pytest.approx(expect, rel=1e-6)
        np.testing.assert_allclose(sol.schedules["heat"][:, 0], heat, rtol=1e-6)
        assert sol.feasibility_residual <= 1e-6


def test_shared_block_dimensions(six_node):
    sc = default_scenario(six_node)
    node = build_dispatch(six_node, sc)
    agm = build_dispatch(derive_agm(six_node), sc, six_node.constants)
    for name in SHARED_BLOCKS:
        assert node.blocks[name][1] == agm.blocks[name][1]
    assert node.horizon == agm.horizon == 24
    assert "node_supply" in node.blocks and "node_supply" not in agm.blocks


def test_unconstrained_scalar():
    r = solve_qp(sp.csc_matrix([[2.0]]), np.array([-4.0]), sp.csc_matrix((0, 1)), np.zeros(0),
                 np.zeros(0))
    assert r.x[0] == pytest.approx(2.0, abs=1e-9)
    assert r.objective == pytest.approx(-4.0, abs=1e-9)


def test_equality_qp_against_kkt(rng):
    n, m = 8, 3
    B = rng.normal(size=(n, n))
    P = B @ B.T + np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    r = solve_qp(sp.csc_matrix(P), q, sp.csc_matrix(A), b, b)
    K = np.block([[P, A.T], [A, np.zeros((m, m))]])
    x = np.linalg.solve(K, np.concatenate([-q, b]))[:n]
    np.testing.assert_allclose(r.x, x, atol=1e-9)


def test_inequality_qp_against_closed_form():
    # min (x - 3)^2 + (y + 1)^2 on the box [0, 2] x [0, 2]: corner (2, 0)
    P = sp.csc_matrix(2.0 * np.eye(2))
    q = np.array([-6.0, 2.0])
    r = solve_qp(P, q, sp.identity(2, format="csc"), np.zeros(2), np.full(2, 2.0))
    np.testing.assert_allclose(r.x, [2.0, 0.0], atol=1e-8)


def test_contradictory_bounds():
    with pytest.raises(Infeasible):
        solve_qp(sp.csc_matrix([[1.0]]), np.zeros(1), sp.csc_matrix([[1.0]]), np.array([2.0]),
                 np.array([1.0]))
    A = sp.csc_matrix(np.array([[1.0], [1.0]]))
    with pytest.raises(Infeasible):
        solve_qp(sp.csc_matrix([[1.0]]), np.zeros(1), A, np.array([1.0, -np.inf]),
                 np.array([np.inf, 0.0]))


def test_same_model_twice_zero_deviation(six_node):
    sc = default_scenario(six_node)
    agm = derive_agm(six_node)
    a = solve_dispatch(build_dispatch(agm, sc, six_node.constants))
    b = solve_dispatch(build_dispatch(agm, sc, six_node.constants))
    assert abs(a.objective - b.objective) / a.objective == 0.0


def test_exact_agm_matches_node_method(six_node):
    cmp = compare_models(six_node, default_scenario(six_node), repeats=1)
    assert cmp.deviation <= 1e-6
    peak = max(d.max() for d in default_scenario(six_node).demand.values())
    # heat profiles, not temperatures: temperature optima need not be unique
    assert np.max(np.abs(cmp.node.total_heat - cmp.agm.total_heat)) <= 0.02 * peak
    assert cmp.node.feasibility_residual <= 1e-6 and cmp.agm.feasibility_residual <= 1e-6
    doc = cmp.as_dict()
    assert len(doc["heat_node"]) == 24


def test_truncation_bias(six_node):
    sc = default_scenario(six_node)
    exact = compare_models(six_node, sc, agm=derive_agm(six_node), repeats=1)
    short = compare_models(six_node, sc, agm=truncate_agm(derive_agm(six_node), 2), repeats=1)
    # dropped lag weight goes to the ambient term, so the short model runs colder and pays more
    assert short.cost_agm > exact.cost_agm
    assert short.deviation < 0.05


def test_demand_beyond_capacity(six_node):
    sc = default_scenario(six_node)
    big = {v: d * 100 for v, d in sc.demand.items()}
    with pytest.raises(InfeasibleBounds):
        build_dispatch(six_node, DispatchScenario(big))


def test_config_errors():
    with pytest.raises(ConfigError):
        ChpParams(c2=-1.0)
    with pytest.raises(ConfigError):
        ChpParams(h_min=10.0, h_max=1.0)
    with pytest.raises(ConfigError):
        TemperatureBounds(return_min=80.0, return_max=70.0)
    with pytest.raises(ConfigError):
        DispatchScenario({"L1": np.ones(3), "L2": np.ones(4)})
    with pytest.raises(ConfigError):
        DispatchScenario({"L1": np.ones(3)}, model="other")


def test_missing_demand(six_node):
    with pytest.raises(ConfigError):
        build_dispatch(six_node, DispatchScenario({"L3": np.ones(4)}))


def test_scenario_round_trip(tmp_path, six_node):
    sc = default_scenario(six_node, horizon=6)
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(scenario_to_dict(sc)))
    back = load_scenario(path)
    assert back.chp == sc.chp and back.bounds == sc.bounds and back.horizon == 6
    for v in sc.demand:
        np.testing.assert_array_equal(back.demand[v], sc.demand[v])
    with pytest.raises(ConfigError):
        scenario_from_dict({"demand": {"L3": [1, 2]}, "horizon": 3})


def test_schedule_outputs(tmp_path, six_node):
    sc = default_scenario(six_node, horizon=6)
    prob = build_dispatch(derive_agm(six_node), sc, six_node.constants)
    sol = solve_dispatch(prob)
    doc = solution_to_dict(sol, prob)
    assert set(doc["schedules"]) == set(SHARED_BLOCKS)
    path = tmp_path / "s.csv"
    write_schedule_csv(sol, prob, path, sc.chp.power_ratio)
    rows = path.read_text().strip().splitlines()
    assert len(rows) == 7
    assert rows[0].startswith("t,heat_S1,power_S1")
    first = rows[1].split(",")
    assert float(first[2]) == pytest.approx(0.5 * float(first[1]), rel=1e-12)
