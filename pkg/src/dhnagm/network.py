"""District heating network description and node-method simulation.

The supply graph is a directed acyclic graph whose edges point in the
direction of supply water flow; the return graph is the same graph with every
edge reversed. Mass flows are constant in time.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import (ConfigError, DanglingReference, DisconnectedNode, DuplicateId,
                     HorizonTooShort, MassImbalance, NonTreeRouting, ZeroMassFlow)
from .measurements import MeasurementSet

MASS_BALANCE_RTOL = 1e-9
# t_d / dt within this of an integer is treated as that integer
_DELAY_SNAP = 1e-9


class NodeKind(str, Enum):
    SOURCE = "source"
    LOAD = "load"
    JUNCTION = "junction"


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    source_mass_flow: float | None = None
    load_mass_flow: float | None = None

    @property
    def mass_flow(self) -> float:
        """Injection (source) or withdrawal (load) mass flow; 0 for junctions."""
        if self.kind is NodeKind.SOURCE:
            return self.source_mass_flow
        if self.kind is NodeKind.LOAD:
            return self.load_mass_flow
        return 0.0


@dataclass(frozen=True)
class Pipe:
    id: str
    from_node: str
    to_node: str
    length: float
    area: float
    loss_coeff: float
    mass_flow: float


@dataclass(frozen=True)
class Constants:
    rho_w: float = 1000.0
    c_w: float = 4.2
    dt: float = 3600.0
    tau_amb: float = 0.0

    def __post_init__(self):
        if not (self.rho_w > 0 and self.c_w > 0 and self.dt > 0):
            raise ConfigError("rho_w, c_w and dt must be positive")


@dataclass(frozen=True)
class PipeKernelParams:
    gamma: int
    alpha: float
    eta: float

    def __post_init__(self):
        if self.gamma < 0 or not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.eta < 1.0:
            raise ValueError(f"invalid node-method parameters {self}")

    @property
    def taps(self) -> tuple[float, float]:
        """Weights of the inlet temperature at lags ``gamma`` and ``gamma + 1``."""
        keep = 1.0 - self.eta
        return keep * self.alpha, keep * (1.0 - self.alpha)


def pipe_kernel_params(pipe: Pipe, constants: Constants) -> PipeKernelParams:
    """Delay, interpolation weight and loss fraction of one pipe.

    The transit time is ``rho * A * L / m``. ``gamma`` is its integer number of
    steps and ``alpha = 1 - frac`` so an exact multiple of ``dt`` is a pure
    delay. ``eta = 1 - exp(-lambda * L / (c_w * m))``.
    """
    if not pipe.mass_flow > 0:
        raise ZeroMassFlow(f"pipe {pipe.id!r} has non-positive mass flow {pipe.mass_flow}")
    transit = constants.rho_w * pipe.area * pipe.length / pipe.mass_flow
    steps = transit / constants.dt
    nearest = round(steps)
    if abs(steps - nearest) <= _DELAY_SNAP * max(1.0, steps):
        steps = float(nearest)
    gamma = int(math.floor(steps))
    alpha = 1.0 - (steps - gamma)
    eta = 1.0 - math.exp(-pipe.loss_coeff * pipe.length / (constants.c_w * pipe.mass_flow))
    return PipeKernelParams(gamma, alpha, eta)


@dataclass(frozen=True)
class NetworkModel:
    """Validated network; build it with :func:`build_network`."""

    nodes: tuple[Node, ...]
    pipes: tuple[Pipe, ...]
    constants: Constants
    kernel_params: Mapping[str, PipeKernelParams]
    supply_in: Mapping[str, tuple[str, ...]]
    supply_out: Mapping[str, tuple[str, ...]]
    order: tuple[str, ...]
    paths: Mapping[tuple[str, str], tuple[str, ...]]
    _node_index: Mapping[str, int] = field(repr=False, compare=False, default=None)
    _pipe_index: Mapping[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_node_index", {n.id: i for i, n in enumerate(self.nodes)})
        object.__setattr__(self, "_pipe_index", {p.id: i for i, p in enumerate(self.pipes)})

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if n.kind is NodeKind.SOURCE)

    @property
    def loads(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if n.kind is NodeKind.LOAD)

    def node(self, node_id: str) -> Node:
        return self.nodes[self._node_index[node_id]]

    def pipe(self, pipe_id: str) -> Pipe:
        return self.pipes[self._pipe_index[pipe_id]]

    @property
    def return_in(self) -> Mapping[str, tuple[str, ...]]:
        """Pipes flowing into each node on the return side."""
        return self.supply_out

    @property
    def return_out(self) -> Mapping[str, tuple[str, ...]]:
        return self.supply_in

    def path(self, source: str, load: str) -> tuple[str, ...] | None:
        """Pipe ids from ``source`` to ``load`` along supply flow, or None."""
        return self.paths.get((source, load))

    def to_config(self) -> dict:
        c = self.constants
        return {
            "constants": {"rho_w": c.rho_w, "c_w": c.c_w, "dt_s": c.dt, "tau_amb_c": c.tau_amb},
            "nodes": [
                {"id": n.id, "kind": n.kind.value}
                | ({} if n.kind is NodeKind.JUNCTION else {"mass_flow_kg_s": n.mass_flow})
                for n in self.nodes
            ],
            "pipes": [
                {"id": p.id, "from": p.from_node, "to": p.to_node, "length_m": p.length,
                 "area_m2": p.area, "lambda_kw_per_m_c": p.loss_coeff,
                 "mass_flow_kg_s": p.mass_flow}
                for p in self.pipes
            ],
        }


@dataclass(frozen=True)
class FlowDecomposition:
    """Source/load mixing fractions.

    ``xi_s[k, v]``: share of the water arriving at load ``v`` that left source
    ``k``. ``xi_r[k, v]``: share of the return water reaching source ``k``
    that left load ``v``. Rows follow ``sources``, columns ``loads``.
    """

    sources: tuple[str, ...]
    loads: tuple[str, ...]
    xi_s: np.ndarray
    xi_r: np.ndarray
    load_pair_flows: np.ndarray
    source_pair_flows: np.ndarray


def _number(obj, key, where):
    if key not in obj:
        raise ConfigError(f"{where}: missing {key!r}")
    val = obj[key]
    if isinstance(val, (list, tuple, dict)):
        raise ConfigError(f"{where}: {key!r} must be a constant number "
                          "(time-varying flow is not supported)")
    try:
        return float(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {key!r} is not a number") from None


def load_network(path) -> NetworkModel:
    with open(path) as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_network(config)


def build_network(config) -> NetworkModel:
    """Validate a network description and compute the node-method parameters.

    ``config`` is a mapping in the JSON layout (``constants``, ``nodes``,
    ``pipes``) or a path to such a file.
    """
    if isinstance(config, (str, os.PathLike)):
        return load_network(config)
    if not isinstance(config, Mapping):
        raise ConfigError("network config must be a mapping")
    cc = config.get("constants", {})
    constants = Constants(
        rho_w=float(cc.get("rho_w", 1000.0)),
        c_w=float(cc.get("c_w", 4.2)),
        dt=float(cc.get("dt_s", 3600.0)),
        tau_amb=float(cc.get("tau_amb_c", 0.0)),
    )

    nodes = []
    seen = set()
    for i, raw in enumerate(config.get("nodes", [])):
        where = f"nodes[{i}]"
        nid = str(raw.get("id", ""))
        if not nid:
            raise ConfigError(f"{where}: missing id")
        if nid in seen:
            raise DuplicateId(f"duplicate node id {nid!r}")
        seen.add(nid)
        try:
            kind = NodeKind(raw.get("kind"))
        except ValueError:
            raise ConfigError(f"{where}: unknown kind {raw.get('kind')!r}") from None
        if kind is NodeKind.JUNCTION:
            if raw.get("mass_flow_kg_s") not in (None, 0, 0.0):
                raise ConfigError(f"junction {nid!r} must not carry a mass flow")
            nodes.append(Node(nid, kind))
            continue
        m = _number(raw, "mass_flow_kg_s", where)
        if not m > 0:
            raise ZeroMassFlow(f"{kind.value} {nid!r} needs a positive mass flow")
        if kind is NodeKind.SOURCE:
            nodes.append(Node(nid, kind, source_mass_flow=m))
        else:
            nodes.append(Node(nid, kind, load_mass_flow=m))
    if not any(n.kind is NodeKind.SOURCE for n in nodes):
        raise ConfigError("network has no source node")
    if not any(n.kind is NodeKind.LOAD for n in nodes):
        raise ConfigError("network has no load node")

    pipes = []
    pseen = set()
    for i, raw in enumerate(config.get("pipes", [])):
        where = f"pipes[{i}]"
        pid = str(raw.get("id", ""))
        if not pid:
            raise ConfigError(f"{where}: missing id")
        if pid in pseen:
            raise DuplicateId(f"duplicate pipe id {pid!r}")
        pseen.add(pid)
        a, b = str(raw.get("from", "")), str(raw.get("to", ""))
        for end in (a, b):
            if end not in seen:
                raise DanglingReference(f"pipe {pid!r} references unknown node {end!r}")
        if a == b:
            raise ConfigError(f"pipe {pid!r} starts and ends at {a!r}")
        pipe = Pipe(pid, a, b,
                    length=_number(raw, "length_m", where),
                    area=_number(raw, "area_m2", where),
                    loss_coeff=_number(raw, "lambda_kw_per_m_c", where),
                    mass_flow=_number(raw, "mass_flow_kg_s", where))
        if not pipe.mass_flow > 0:
            raise ZeroMassFlow(f"pipe {pid!r} has non-positive mass flow")
        if not (pipe.length > 0 and pipe.area > 0 and pipe.loss_coeff >= 0):
            raise ConfigError(f"pipe {pid!r}: length and area must be positive, "
                              "loss coefficient non-negative")
        pipes.append(pipe)

    return _assemble(tuple(nodes), tuple(pipes), constants)


def _assemble(nodes, pipes, constants) -> NetworkModel:
    ids = [n.id for n in nodes]
    sin = {n: [] for n in ids}
    sout = {n: [] for n in ids}
    for p in pipes:
        sout[p.from_node].append(p.id)
        sin[p.to_node].append(p.id)
    by_id = {p.id: p for p in pipes}

    for n in nodes:
        if not sin[n.id] and not sout[n.id]:
            raise DisconnectedNode(f"node {n.id!r} has no pipes")

    worst = None
    for n in nodes:
        inflow = sum(by_id[p].mass_flow for p in sin[n.id])
        outflow = sum(by_id[p].mass_flow for p in sout[n.id])
        inject = n.mass_flow if n.kind is NodeKind.SOURCE else 0.0
        draw = n.mass_flow if n.kind is NodeKind.LOAD else 0.0
        imbalance = inflow + inject - outflow - draw
        scale = max(inflow + inject, outflow + draw, 1.0)
        rel = abs(imbalance) / scale
        if rel > MASS_BALANCE_RTOL and (worst is None or rel > worst[0]):
            worst = (rel, n.id, imbalance)
    if worst is not None:
        raise MassImbalance(worst[1], worst[2])

    # Kahn's algorithm; leftovers mean a directed cycle
    indeg = {n: len(sin[n]) for n in ids}
    ready = [n for n in ids if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for p in sout[n]:
            m = by_id[p].to_node
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    if len(order) != len(ids):
        cyc = sorted(set(ids) - set(order))
        raise NonTreeRouting(None, None, f"supply graph contains a cycle through {cyc}")

    kinds = {n.id: n.kind for n in nodes}
    paths = {}
    for s in (n.id for n in nodes if n.kind is NodeKind.SOURCE):
        count = {n: 0 for n in ids}
        route = {}
        count[s] = 1
        route[s] = ()
        for n in order:
            if n == s:
                continue
            for p in sin[n]:
                up = by_id[p].from_node
                if count[up]:
                    count[n] += count[up]
                    route[n] = route[up] + (p,)
        for n in order:
            if count[n] > 1:
                bad = n if kinds[n] is NodeKind.LOAD else _first_load_below(n, order, sout, by_id, kinds)
                raise NonTreeRouting(s, bad)
            if count[n] == 1 and kinds[n] is NodeKind.LOAD:
                paths[(s, n)] = route[n]

    params = {p.id: pipe_kernel_params(p, constants) for p in pipes}
    return NetworkModel(
        nodes=nodes, pipes=pipes, constants=constants, kernel_params=params,
        supply_in={k: tuple(v) for k, v in sin.items()},
        supply_out={k: tuple(v) for k, v in sout.items()},
        order=tuple(order), paths=paths,
    )


def _first_load_below(node, order, sout, by_id, kinds):
    reach = {node}
    for n in order:
        if n in reach:
            for p in sout[n]:
                reach.add(by_id[p].to_node)
            if kinds[n] is NodeKind.LOAD:
                return n
    return node


def trace_flow_fractions(network: NetworkModel) -> FlowDecomposition:
    """Proportional-sharing flow tracing on the supply and return graphs.

    Each node's provenance vector is the flow-weighted mix of its inflows'
    provenance (plus its own injection), visited in topological order.
    """
    sources, loads = network.sources, network.loads
    s_idx = {s: i for i, s in enumerate(sources)}
    l_idx = {v: i for i, v in enumerate(loads)}

    prov = {}
    for n in network.order:
        node = network.node(n)
        vec = np.zeros(len(sources))
        total = 0.0
        if node.kind is NodeKind.SOURCE:
            vec[s_idx[n]] += node.mass_flow
            total += node.mass_flow
        for pid in network.supply_in[n]:
            p = network.pipe(pid)
            vec += p.mass_flow * prov[p.from_node]
            total += p.mass_flow
        prov[n] = vec / total

    rprov = {}
    for n in reversed(network.order):
        node = network.node(n)
        vec = np.zeros(len(loads))
        total = 0.0
        if node.kind is NodeKind.LOAD:
            vec[l_idx[n]] += node.mass_flow
            total += node.mass_flow
        for pid in network.return_in[n]:
            p = network.pipe(pid)
            vec += p.mass_flow * rprov[p.to_node]
            total += p.mass_flow
        rprov[n] = vec / total

    xi_s = np.column_stack([prov[v] for v in loads])
    xi_r = np.vstack([rprov[k] for k in sources])
    m_load = np.array([network.node(v).mass_flow for v in loads])
    m_src = np.array([network.node(k).mass_flow for k in sources])
    return FlowDecomposition(
        sources=sources, loads=loads, xi_s=xi_s, xi_r=xi_r,
        load_pair_flows=xi_s * m_load[None, :],
        source_pair_flows=xi_r * m_src[:, None],
    )


def _side_program(network: NetworkModel, side: str, tau_amb: float, steady: bool = False):
    """Flatten one side of the network into the arrays the kernels consume."""
    idx = {n.id: i for i, n in enumerate(network.nodes)}
    pidx = {p.id: i for i, p in enumerate(network.pipes)}
    n_nodes, n_pipes = len(network.nodes), len(network.pipes)
    if side == "supply":
        order = network.order
        injectors = {k: i for i, k in enumerate(network.sources)}
        incoming = network.supply_in
    else:
        order = tuple(reversed(network.order))
        injectors = {v: i for i, v in enumerate(network.loads)}
        incoming = network.return_in

    inj_col = np.full(n_nodes, -1, dtype=np.int64)
    inj_flow = np.zeros(n_nodes)
    for nid, col in injectors.items():
        inj_col[idx[nid]] = col
        inj_flow[idx[nid]] = network.node(nid).mass_flow
    in_ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    in_pipe = []
    for i, n in enumerate(network.nodes):
        in_pipe.extend(pidx[p] for p in incoming[n.id])
        in_ptr[i + 1] = len(in_pipe)

    pipe_from = np.empty(n_pipes, dtype=np.int64)
    gamma = np.empty(n_pipes, dtype=np.int64)
    c0 = np.empty(n_pipes)
    c1 = np.empty(n_pipes)
    flow = np.empty(n_pipes)
    loss = np.empty(n_pipes)
    for j, p in enumerate(network.pipes):
        kp = network.kernel_params[p.id]
        pipe_from[j] = idx[p.from_node] if side == "supply" else idx[p.to_node]
        a0, a1 = kp.taps
        if steady:
            gamma[j], c0[j], c1[j] = 0, a0 + a1, 0.0
        else:
            gamma[j], c0[j], c1[j] = kp.gamma, a0, a1
        flow[j] = p.mass_flow
        loss[j] = kp.eta * tau_amb
    return (np.array([idx[n] for n in order], dtype=np.int64), inj_col, inj_flow,
            in_ptr, np.array(in_pipe, dtype=np.int64), pipe_from, gamma, c0, c1, flow, loss)


def _as_matrix(series, ids, horizon, what):
    if isinstance(series, Mapping):
        cols = [np.asarray(series[i], dtype=float) for i in ids]
        mat = np.column_stack(cols) if cols else np.empty((0, 0))
    else:
        mat = np.asarray(series, dtype=float)
        if mat.ndim == 1 and len(ids) == 1:
            mat = mat[:, None]
    if mat.ndim != 2 or mat.shape[1] != len(ids):
        raise ValueError(f"{what} must have one column per node ({len(ids)})")
    if horizon is not None and mat.shape[0] < horizon:
        raise HorizonTooShort(f"{what} has {mat.shape[0]} steps, horizon is {horizon}")
    return np.ascontiguousarray(mat[:horizon] if horizon is not None else mat)


def simulate(network: NetworkModel, source_supply, load_return, horizon: int | None = None,
             initial_temp: float | None = None) -> MeasurementSet:
    """Node-method simulation of supply and return temperatures.

    Parameters
    ----------
    source_supply, load_return : array_like or mapping
        Boundary inputs, shape ``(T, n_sources)`` / ``(T, n_loads)`` or a
        mapping from node id to series.
    horizon : int, optional
        Number of steps to simulate; defaults to the shortest input.
    initial_temp : float, optional
        Temperature of all pipe contents before step 0. Defaults to the
        ambient temperature.

    Returns
    -------
    MeasurementSet
        Source and load channels on both sides.
    """
    if horizon is not None and horizon < 1:
        raise HorizonTooShort("horizon must be at least one step")
    src = _as_matrix(source_supply, network.sources, horizon, "source_supply")
    ret = _as_matrix(load_return, network.loads, horizon, "load_return")
    T = min(src.shape[0], ret.shape[0]) if horizon is None else horizon
    src, ret = src[:T], ret[:T]
    tau_amb = network.constants.tau_amb
    init = tau_amb if initial_temp is None else float(initial_temp)

    sup = kernels.simulate_side(*_side_program(network, "supply", tau_amb), src, init)
    rtn = kernels.simulate_side(*_side_program(network, "return", tau_amb), ret, init)
    idx = {n.id: i for i, n in enumerate(network.nodes)}
    channels = {}
    for i, k in enumerate(network.sources):
        channels[(k, "supply")] = src[:, i]
        channels[(k, "return")] = rtn[:, idx[k]]
    for i, v in enumerate(network.loads):
        channels[(v, "supply")] = sup[:, idx[v]]
        channels[(v, "return")] = ret[:, i]
    return MeasurementSet(network.constants.dt, tau_amb, channels,
                          network.sources, network.loads)


def steady_state(network: NetworkModel, source_supply: Sequence[float],
                 load_return: Sequence[float], tau_amb: float | None = None):
    """Node temperatures for constant boundary inputs.

    Returns ``(supply, return)`` dicts mapping node id to temperature.
    """
    tau_amb = network.constants.tau_amb if tau_amb is None else tau_amb
    src = np.asarray(source_supply, dtype=float).reshape(1, -1)
    ret = np.asarray(load_return, dtype=float).reshape(1, -1)
    sup = kernels.simulate_side(*_side_program(network, "supply", tau_amb, steady=True),
                                np.ascontiguousarray(src), tau_amb)
    rtn = kernels.simulate_side(*_side_program(network, "return", tau_amb, steady=True),
                                np.ascontiguousarray(ret), tau_amb)
    ids = [n.id for n in network.nodes]
    return ({n: float(sup[0, i]) for i, n in enumerate(ids)},
            {n: float(rtn[0, i]) for i, n in enumerate(ids)})
