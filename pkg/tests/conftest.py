from importlib import resources

import numpy as np
import pytest

from dhnagm import build_network
from dhnagm.experiments import default_network_path
from dhnagm.network import load_network


def single_pipe_config(length=1000.0, area=0.1, lam=0.0, m=50.0, dt=3600.0, tau_amb=0.0):
    return {
        "constants": {"rho_w": 1000.0, "c_w": 4.2, "dt_s": dt, "tau_amb_c": tau_amb},
        "nodes": [
            {"id": "S1", "kind": "source", "mass_flow_kg_s": m},
            {"id": "L1", "kind": "load", "mass_flow_kg_s": m},
        ],
        "pipes": [
            {"id": "P1", "from": "S1", "to": "L1", "length_m": length, "area_m2": area,
             "lambda_kw_per_m_c": lam, "mass_flow_kg_s": m},
        ],
    }


def two_source_config(m1=60.0, m2=40.0, tau_amb=0.0):
    """Two sources merging at a junction that feeds one load."""
    m = m1 + m2
    pipe = dict(length_m=1000.0, lambda_kw_per_m_c=0.003)
    return {
        "constants": {"rho_w": 1000.0, "c_w": 4.2, "dt_s": 3600.0, "tau_amb_c": tau_amb},
        "nodes": [
            {"id": "S1", "kind": "source", "mass_flow_kg_s": m1},
            {"id": "S2", "kind": "source", "mass_flow_kg_s": m2},
            {"id": "J1", "kind": "junction"},
            {"id": "L1", "kind": "load", "mass_flow_kg_s": m},
        ],
        "pipes": [
            {"id": "P1", "from": "S1", "to": "J1", "area_m2": m1 * 2.5 / 1000, "mass_flow_kg_s": m1, **pipe},
            {"id": "P2", "from": "S2", "to": "J1", "area_m2": m2 * 6.0 / 1000, "mass_flow_kg_s": m2, **pipe},
            {"id": "P3", "from": "J1", "to": "L1", "area_m2": m * 4.0 / 1000, "mass_flow_kg_s": m, **pipe},
        ],
    }


@pytest.fixture(scope="session")
def seven_node():
    return load_network(default_network_path())


@pytest.fixture(scope="session")
def six_node():
    return load_network(resources.files("dhnagm") / "data" / "six_node.json")


@pytest.fixture
def two_source():
    return build_network(two_source_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one line each at the end of the run
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[mark.args[0]] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
