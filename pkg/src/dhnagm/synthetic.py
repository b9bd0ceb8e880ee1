"""Random tree-routed network descriptions for tests and benchmarks."""

from __future__ import annotations

import numpy as np

from .measurements import _rng


def random_tree_config(seed, n_sources: int = 2, n_loads: int = 6, n_junctions: int | None = None,
                       dt: float = 3600.0, tau_amb: float = 5.0) -> dict:
    """Network description with unique source-to-load routes.

    A random arborescence rooted at the first source connects junctions and
    loads (loads are leaves). Every further source feeds one junction through
    its own pipe, taking a share of the smallest flow on the route down to
    that junction, so all pipe flows stay positive. Pipe areas follow from a random
    water velocity, which keeps transport delays to a few steps.
    """
    if n_sources < 1 or n_loads < 1:
        raise ValueError("need at least one source and one load")
    rng = _rng(seed)
    n_junctions = max(1, n_loads // 2) if n_junctions is None else n_junctions
    if n_sources > 1 and n_junctions < 1:
        raise ValueError("extra sources need a junction to feed")
    junctions = [f"J{i + 1}" for i in range(n_junctions)]
    loads = [f"L{i + 1}" for i in range(n_loads)]
    sources = [f"S{i + 1}" for i in range(n_sources)]

    parent = {}
    placed = [sources[0]]
    for j in junctions:
        parent[j] = placed[rng.integers(len(placed))]
        placed.append(j)
    hosts = [sources[0]] + junctions
    for v in loads:
        parent[v] = hosts[rng.integers(len(hosts))]
    if n_sources > 1 and all(parent[v] == sources[0] for v in loads):
        parent[loads[0]] = junctions[-1]
    # junctions without loads underneath would carry no flow
    children = {n: [] for n in [sources[0]] + junctions + loads}
    for n, p in parent.items():
        children[p].append(n)

    demand = {v: float(rng.uniform(10.0, 40.0)) for v in loads}

    def subtree_load(n):
        return demand.get(n, 0.0) + sum(subtree_load(c) for c in children[n])

    flow = {n: subtree_load(n) for n in parent}
    live = [j for j in junctions if flow[j] > 0]

    def chain(n):
        out = []
        while n in parent:
            out.append(n)
            n = parent[n]
        return out

    inject = {}
    for k in sources[1:]:
        j = live[rng.integers(len(live))]
        # every pipe between the first source and j carries less afterwards
        m = float(rng.uniform(0.2, 0.8)) * min(flow[n] for n in chain(j))
        inject[k] = (j, m)
        for n in chain(j):
            flow[n] -= m

    nodes = [{"id": sources[0], "kind": "source",
              "mass_flow_kg_s": sum(demand.values()) - sum(m for _, m in inject.values())}]
    nodes += [{"id": k, "kind": "source", "mass_flow_kg_s": m} for k, (_, m) in inject.items()]
    nodes += [{"id": j, "kind": "junction"} for j in junctions if flow[j] > 0]
    nodes += [{"id": v, "kind": "load", "mass_flow_kg_s": demand[v]} for v in loads]

    pipes = []

    def pipe(frm, to, m):
        velocity = float(rng.uniform(0.4, 1.5))
        pipes.append({
            "id": f"P{len(pipes) + 1}", "from": frm, "to": to,
            "length_m": float(rng.uniform(500.0, 4000.0)), "area_m2": m / (1000.0 * velocity),
            "lambda_kw_per_m_c": float(rng.uniform(0.002, 0.005)), "mass_flow_kg_s": m,
        })

    for n, p in parent.items():
        if flow[n] > 0:
            pipe(p, n, flow[n])
    for k, (j, m) in inject.items():
        pipe(k, j, m)
    return {
        "constants": {"rho_w": 1000.0, "c_w": 4.2, "dt_s": dt, "tau_amb_c": tau_amb},
        "nodes": nodes, "pipes": pipes,
    }
