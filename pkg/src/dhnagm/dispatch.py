"""Convex economic dispatch of CHP-fed district heating.

The same quadratic program is built with two thermal models: the pipe-level
node method, or the aggregate source/load model. Both are linear in the
temperatures, so the dispatch stays a QP solved with OSQP.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .agm import AgmModel, derive_agm, truncate_agm
from .errors import ConfigError, Infeasible, InfeasibleBounds, MaxIterations
from .network import Constants, NetworkModel, _side_program, steady_state

KINDS = ("node_method", "agm")
SHARED_BLOCKS = ("source_supply", "source_return", "load_supply", "load_return", "heat")


@dataclass(frozen=True)
class ChpParams:
    """Per-unit cost ``c2 h^2 + c1 h + c0`` minus ``price * power_ratio * h``.

    Every source hosts one unit with these parameters; electric output is
    ``power_ratio * h``.
    """

    c2: float = 2e-6
    c1: float = 0.02
    c0: float = 10.0
    power_ratio: float = 0.5
    price: float = 0.0
    h_min: float = 0.0
    h_max: float = 50_000.0

    def __post_init__(self):
        if self.c2 < 0:
            raise ConfigError("c2 must be non-negative for a convex cost")
        if self.h_min > self.h_max:
            raise ConfigError("h_min exceeds h_max")


@dataclass(frozen=True)
class TemperatureBounds:
    source_supply_min: float = 70.0
    source_supply_max: float = 120.0
    load_supply_min: float = 65.0
    return_min: float = 30.0
    return_max: float = 75.0

    def __post_init__(self):
        if self.source_supply_min > self.source_supply_max:
            raise ConfigError("source supply bounds are inverted")
        if self.return_min > self.return_max:
            raise ConfigError("return temperature bounds are inverted")


@dataclass(frozen=True)
class DispatchScenario:
    """Demand (kW per load and step), unit data, bounds and the warm-start
    temperatures assumed before step 0."""

    demand: Mapping[str, np.ndarray]
    chp: ChpParams = field(default_factory=ChpParams)
    bounds: TemperatureBounds = field(default_factory=TemperatureBounds)
    history_supply: float = 85.0
    history_return: float = 45.0
    model: str = "agm"
    m_trc: int | None = 4

    def __post_init__(self):
        dem = {str(k): np.asarray(v, dtype=float) for k, v in self.demand.items()}
        lengths = {d.shape for d in dem.values()}
        if not dem or len(lengths) != 1 or len(next(iter(lengths))) != 1:
            raise ConfigError("demand must hold equally long 1-d series")
        if self.model not in KINDS:
            raise ConfigError(f"model must be one of {KINDS}")
        object.__setattr__(self, "demand", dem)

    @property
    def horizon(self) -> int:
        return next(iter(self.demand.values())).shape[0]


@dataclass(frozen=True)
class DispatchProblem:
    """QP ``min 1/2 x'Px + q'x + constant`` s.t. ``l <= Ax <= u``.

    ``blocks[name] = (offset, n_cols)``; every block is ``horizon x n_cols``
    stored row-major by step.
    """

    kind: str
    horizon: int
    sources: tuple[str, ...]
    loads: tuple[str, ...]
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    constant: float
    blocks: Mapping[str, tuple[int, int]]
    col_scale: np.ndarray | None = None

    @property
    def n_vars(self) -> int:
        return self.q.shape[0]

    def block(self, x, name) -> np.ndarray:
        off, n = self.blocks[name]
        return np.asarray(x[off:off + self.horizon * n]).reshape(self.horizon, n)


@dataclass(frozen=True)
class QpResult:
    x: np.ndarray
    y: np.ndarray
    objective: float
    status: str
    iterations: int
    run_time: float


@dataclass(frozen=True)
class DispatchSolution:
    kind: str
    objective: float
    schedules: Mapping[str, np.ndarray]
    feasibility_residual: float
    solve_time: float
    status: str
    iterations: int

    @property
    def total_heat(self) -> np.ndarray:
        return self.schedules["heat"].sum(axis=1)


class _Builder:
    def __init__(self, horizon):
        self.H = horizon
        self.blocks = {}
        self.n = 0
        self.rows, self.cols, self.vals = [], [], []
        self.l, self.u = [], []

    def add_block(self, name, n):
        self.blocks[name] = (self.n, n)
        self.n += self.H * n

    def idx(self, name, t, j):
        off, n = self.blocks[name]
        return off + t * n + j

    def row(self, entries, lo, hi):
        r = len(self.l)
        for col, val in entries:
            if val != 0.0:
                self.rows.append(r)
                self.cols.append(col)
                self.vals.append(val)
        self.l.append(lo)
        self.u.append(hi)

    def box(self, name, lo, hi):
        _, n = self.blocks[name]
        for t in range(self.H):
            for j in range(n):
                self.row([(self.idx(name, t, j), 1.0)], lo, hi)

    def matrix(self):
        A = sp.csc_matrix((self.vals, (self.rows, self.cols)), shape=(len(self.l), self.n))
        return A, np.array(self.l, dtype=float), np.array(self.u, dtype=float)


def _max_load_supply(model, constants, bounds):
    ts = bounds.source_supply_max
    if isinstance(model, NetworkModel):
        sup, _ = steady_state(model, [ts] * len(model.sources),
                              [bounds.return_min] * len(model.loads))
        return {v: sup[v] for v in model.loads}
    return {v: float(model.stm[v].sum()) * ts + model.stm_offset[v] * constants.tau_amb
            for v in model.loads}


def build_dispatch(model: NetworkModel | AgmModel, scenario: DispatchScenario,
                   constants: Constants | None = None) -> DispatchProblem:
    """Assemble the dispatch QP for a network (node method) or an AGM.

    For an AgmModel the mass flows come from ``model.mass_flows`` and the
    physical constants from ``constants`` (defaults otherwise).
    """
    if isinstance(model, NetworkModel):
        kind = "node_method"
        constants = model.constants
        flows = {n.id: n.mass_flow for n in model.nodes}
    elif isinstance(model, AgmModel):
        kind = "agm"
        constants = constants or Constants()
        flows = dict(model.mass_flows)
    else:
        raise TypeError("model must be a NetworkModel or an AgmModel")
    sources, loads = tuple(model.sources), tuple(model.loads)
    missing = [v for v in loads if v not in scenario.demand]
    if missing:
        raise ConfigError(f"no demand series for loads {missing}")
    if any(n not in flows for n in sources + loads):
        raise ConfigError("mass flows of sources and loads are required")

    H, cw, b, chp = scenario.horizon, constants.c_w, scenario.bounds, scenario.chp
    demand = np.column_stack([scenario.demand[v] for v in loads])
    ts_max_load = _max_load_supply(model, constants, b)
    for j, v in enumerate(loads):
        if b.load_supply_min > ts_max_load[v] + 1e-9:
            raise InfeasibleBounds(
                f"{v}: supply minimum {b.load_supply_min} above reachable {ts_max_load[v]:.4g}")
        cap = cw * flows[v] * (ts_max_load[v] - b.return_min)
        if demand[:, j].max() > cap * (1 + 1e-9):
            raise InfeasibleBounds(
                f"{v}: demand {demand[:, j].max():.6g} exceeds steady capacity {cap:.6g}")

    bld = _Builder(H)
    for name, n in (("source_supply", len(sources)), ("source_return", len(sources)),
                    ("load_supply", len(loads)), ("load_return", len(loads)),
                    ("heat", len(sources))):
        bld.add_block(name, n)
    if kind == "node_method":
        bld.add_block("node_supply", len(model.nodes))
        bld.add_block("node_return", len(model.nodes))
        _node_constraints(bld, model, scenario)
    else:
        _agm_constraints(bld, model, scenario, constants.tau_amb)

    for t in range(H):
        for j, v in enumerate(loads):
            f = cw * flows[v]
            bld.row([(bld.idx("load_supply", t, j), f), (bld.idx("load_return", t, j), -f)],
                    demand[t, j], demand[t, j])
        for j, k in enumerate(sources):
            f = cw * flows[k]
            bld.row([(bld.idx("heat", t, j), 1.0), (bld.idx("source_supply", t, j), -f),
                     (bld.idx("source_return", t, j), f)], 0.0, 0.0)
    bld.box("source_supply", b.source_supply_min, b.source_supply_max)
    bld.box("load_supply", b.load_supply_min, np.inf)
    bld.box("load_return", b.return_min, b.return_max)
    bld.box("heat", chp.h_min, chp.h_max)

    A, l, u = bld.matrix()
    P_diag = np.zeros(bld.n)
    q = np.zeros(bld.n)
    off, n = bld.blocks["heat"]
    P_diag[off:off + H * n] = 2.0 * chp.c2
    q[off:off + H * n] = chp.c1 - chp.price * chp.power_ratio
    # heat in kW is orders of magnitude above the temperatures; solve it in kelvin-equivalents
    col_scale = np.ones(bld.n)
    col_scale[off:off + H * n] = np.tile([cw * flows[k] for k in sources], H)
    return DispatchProblem(kind, H, sources, loads, sp.diags(P_diag, format="csc"), q, A, l, u,
                           H * len(sources) * chp.c0, dict(bld.blocks), col_scale)


def _agm_constraints(bld, agm, scenario, tau_amb):
    H = bld.H
    hs, hr = scenario.history_supply, scenario.history_return
    for t in range(H):
        for j, v in enumerate(agm.loads):
            entries = [(bld.idx("load_supply", t, j), 1.0)]
            rhs = agm.stm_offset[v] * tau_amb
            for lag, row in enumerate(agm.stm_lags(v)):
                for i, a in enumerate(row):
                    if a == 0.0:
                        continue
                    if t - lag >= 0:
                        entries.append((bld.idx("source_supply", t - lag, i), -a))
                    else:
                        rhs += a * hs
            bld.row(entries, rhs, rhs)
        for i, k in enumerate(agm.sources):
            entries = [(bld.idx("source_return", t, i), 1.0)]
            rhs = agm.rtm_offset[k] * tau_amb
            for lag, row in enumerate(agm.rtm_lags(k)):
                for j, a in enumerate(row):
                    if a == 0.0:
                        continue
                    if t - lag >= 0:
                        entries.append((bld.idx("load_return", t - lag, j), -a))
                    else:
                        rhs += a * hr
            bld.row(entries, rhs, rhs)


def _node_constraints(bld, net, scenario):
    H = bld.H
    tau_amb = net.constants.tau_amb
    hist_s, hist_r = steady_state(net, [scenario.history_supply] * len(net.sources),
                                  [scenario.history_return] * len(net.loads))
    ids = [n.id for n in net.nodes]
    for side, node_block, inj_block, hist in (
            ("supply", "node_supply", "source_supply", hist_s),
            ("return", "node_return", "load_return", hist_r)):
        (order, inj_col, inj_flow, in_ptr, in_pipe, pipe_from,
         gamma, c0, c1, flow, loss) = _side_program(net, side, tau_amb)
        for t in range(H):
            for n in order:
                total = inj_flow[n] + sum(flow[in_pipe[q]] for q in range(in_ptr[n], in_ptr[n + 1]))
                entries = [(bld.idx(node_block, t, n), total)]
                rhs = 0.0
                if inj_col[n] >= 0:
                    entries.append((bld.idx(inj_block, t, inj_col[n]), -inj_flow[n]))
                for q in range(in_ptr[n], in_ptr[n + 1]):
                    j = in_pipe[q]
                    up = pipe_from[j]
                    rhs += flow[j] * loss[j]
                    for lag, coef in ((gamma[j], c0[j]), (gamma[j] + 1, c1[j])):
                        if coef == 0.0:
                            continue
                        if t - lag >= 0:
                            entries.append((bld.idx(node_block, t - lag, up), -flow[j] * coef))
                        else:
                            rhs += flow[j] * coef * hist[ids[up]]
                bld.row(entries, rhs, rhs)
    node = {n: i for i, n in enumerate(ids)}
    for t in range(H):
        for j, v in enumerate(net.loads):
            bld.row([(bld.idx("load_supply", t, j), 1.0),
                     (bld.idx("node_supply", t, node[v]), -1.0)], 0.0, 0.0)
        for i, k in enumerate(net.sources):
            bld.row([(bld.idx("source_return", t, i), 1.0),
                     (bld.idx("node_return", t, node[k]), -1.0)], 0.0, 0.0)


def solve_qp(P, q, A, l, u, *, col_scale=None, eps: float = 1e-9,
             max_iter: int = 400_000) -> QpResult:
    """Solve ``min 1/2 x'Px + q'x`` s.t. ``l <= Ax <= u``.

    Equality-only problems go straight to the KKT system; everything else is
    solved by OSQP with solution polishing, after equilibrating the rows of
    ``A`` and substituting ``x = col_scale * z``.
    """
    P = sp.csc_matrix(P)
    A = sp.csc_matrix(A)
    q, l, u = (np.asarray(v, dtype=float) for v in (q, l, u))
    if np.any(l > u):
        bad = int(np.argmax(l > u))
        raise Infeasible(f"constraint {bad}: lower bound {l[bad]} exceeds upper bound {u[bad]}")
    n = q.shape[0]
    if A.shape[0] and np.array_equal(l, u):
        t0 = time.perf_counter()
        K = sp.bmat([[P, A.T], [A, None]], format="csc")
        try:
            with np.errstate(all="ignore"):
                sol = spla.spsolve(K, np.concatenate([-q, u]))
        except RuntimeError as exc:
            raise Infeasible(f"singular KKT system: {exc}") from None
        if not np.all(np.isfinite(sol)):
            raise Infeasible("singular KKT system")
        x = sol[:n]
        return QpResult(x, sol[n:], float(0.5 * x @ (P @ x) + q @ x), "solved", 1,
                        time.perf_counter() - t0)

    import osqp

    d = np.ones(n) if col_scale is None else np.asarray(col_scale, dtype=float)
    D = sp.diags(d)
    As = (A @ D).tocsr()
    rs = np.asarray(abs(As).max(axis=1).todense()).ravel() if As.shape[0] else np.ones(0)
    rs[rs == 0] = 1.0
    As = (sp.diags(1.0 / rs) @ As).tocsc()
    solver = osqp.OSQP()
    solver.setup(sp.triu(D @ P @ D, format="csc"), d * q, As, l / rs, u / rs, verbose=False,
                 eps_abs=eps, eps_rel=eps, eps_prim_inf=1e-9, eps_dual_inf=1e-9,
                 max_iter=max_iter, polishing=True, polish_refine_iter=10)
    res = solver.solve(raise_error=False)
    status = str(res.info.status).lower()
    if "infeasible" in status:
        raise Infeasible(f"QP is infeasible ({res.info.status})")
    if "maximum iterations" in status:
        raise MaxIterations(f"OSQP stopped after {res.info.iter} iterations")
    if not status.startswith("solved") or res.x is None:
        raise Infeasible(f"QP solve failed ({res.info.status})")
    x = d * np.asarray(res.x)
    return QpResult(x, np.asarray(res.y) / rs, float(0.5 * x @ (P @ x) + q @ x), status,
                    int(res.info.iter), float(res.info.run_time))


def constraint_violation(A, l, u, x) -> float:
    Ax = A @ x
    return float(max(0.0, np.max(Ax - u, initial=0.0), np.max(l - Ax, initial=0.0)))


def solve_dispatch(problem: DispatchProblem) -> DispatchSolution:
    res = solve_qp(problem.P, problem.q, problem.A, problem.l, problem.u,
                   col_scale=problem.col_scale)
    schedules = {name: problem.block(res.x, name) for name in problem.blocks}
    return DispatchSolution(
        kind=problem.kind, objective=res.objective + problem.constant, schedules=schedules,
        feasibility_residual=constraint_violation(problem.A, problem.l, problem.u, res.x),
        solve_time=res.run_time, status=res.status, iterations=res.iterations,
    )


@dataclass(frozen=True)
class Comparison:
    cost_node: float
    cost_agm: float
    deviation: float
    time_node: float
    time_agm: float
    node: DispatchSolution
    agm: DispatchSolution

    def as_dict(self) -> dict:
        return {
            "cost_node": self.cost_node, "cost_agm": self.cost_agm, "deviation": self.deviation,
            "times": {"node_method": self.time_node, "agm": self.time_agm},
            "heat_node": self.node.total_heat.tolist(), "heat_agm": self.agm.total_heat.tolist(),
        }


def _timed(problem, repeats):
    best = None
    for _ in range(max(1, repeats)):
        sol = solve_dispatch(problem)
        if best is None or sol.solve_time < best.solve_time:
            best = sol
    return best


def compare_models(network: NetworkModel, scenario: DispatchScenario,
                   agm: AgmModel | None = None, repeats: int = 5) -> Comparison:
    """Solve the dispatch with the node method and with an AGM.

    Without an explicit ``agm`` the derived model is used, truncated to
    ``scenario.m_trc`` lags per pair when that is set. Solve times are the
    fastest of ``repeats`` solver runs.
    """
    if agm is None:
        agm = derive_agm(network)
        if scenario.m_trc is not None:
            agm = truncate_agm(agm, scenario.m_trc)
    node_sol = _timed(build_dispatch(network, scenario), repeats)
    agm_sol = _timed(build_dispatch(agm, scenario, network.constants), repeats)
    dev = abs(agm_sol.objective - node_sol.objective) / abs(node_sol.objective)
    return Comparison(node_sol.objective, agm_sol.objective, dev, node_sol.solve_time,
                      agm_sol.solve_time, node_sol, agm_sol)


def scenario_from_dict(doc: Mapping) -> DispatchScenario:
    try:
        demand = {k: np.asarray(v, dtype=float) for k, v in doc["demand"].items()}
        horizon = doc.get("horizon")
        if horizon is not None and any(len(d) != int(horizon) for d in demand.values()):
            raise ConfigError(f"demand series length differs from horizon {horizon}")
        hist = doc.get("history", {})
        return DispatchScenario(
            demand=demand, chp=ChpParams(**doc.get("chp", {})),
            bounds=TemperatureBounds(**doc.get("bounds", {})),
            history_supply=float(hist.get("supply_c", 85.0)),
            history_return=float(hist.get("return_c", 45.0)),
            model=doc.get("model", "agm"),
            m_trc=doc.get("m_trc", 4),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid dispatch scenario: {exc}") from None


def load_scenario(path) -> DispatchScenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return scenario_from_dict(doc)


def scenario_to_dict(s: DispatchScenario) -> dict:
    return {
        "format": "dispatch/1", "horizon": s.horizon, "model": s.model, "m_trc": s.m_trc,
        "demand": {k: v.tolist() for k, v in s.demand.items()},
        "chp": s.chp.__dict__.copy(), "bounds": s.bounds.__dict__.copy(),
        "history": {"supply_c": s.history_supply, "return_c": s.history_return},
    }


def solution_to_dict(sol: DispatchSolution, problem: DispatchProblem) -> dict:
    return {
        "model": sol.kind, "objective": sol.objective, "status": sol.status,
        "feasibility_residual": sol.feasibility_residual, "solve_time_s": sol.solve_time,
        "iterations": sol.iterations, "sources": list(problem.sources),
        "loads": list(problem.loads),
        "schedules": {k: sol.schedules[k].tolist() for k in SHARED_BLOCKS},
    }


def write_schedule_csv(sol: DispatchSolution, problem: DispatchProblem, path,
                       power_ratio: float) -> None:
    """One row per step: heat, power and supply/return temperatures."""
    header = ["t"]
    for k in problem.sources:
        header += [f"heat_{k}", f"power_{k}", f"supply_{k}", f"return_{k}"]
    for v in problem.loads:
        header += [f"supply_{v}", f"return_{v}"]
    s = sol.schedules
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(problem.horizon):
            row = [t]
            for i in range(len(problem.sources)):
                h = float(s["heat"][t, i])
                row += [repr(h), repr(power_ratio * h), repr(float(s["source_supply"][t, i])),
                        repr(float(s["source_return"][t, i]))]
            for j in range(len(problem.loads)):
                row += [repr(float(s["load_supply"][t, j])), repr(float(s["load_return"][t, j]))]
            w.writerow(row)


def default_scenario(network: NetworkModel, horizon: int = 24, model: str = "agm",
                     m_trc: int | None = 4) -> DispatchScenario:
    """Daily demand profile: each load draws a 12 K drop on average, swinging 4 K."""
    t = np.arange(horizon)
    cw = network.constants.c_w
    demand = {}
    for i, v in enumerate(network.loads):
        m = network.node(v).mass_flow
        demand[v] = cw * m * (12.0 + 4.0 * np.sin(2 * np.pi * t / 24 + 0.7 * i))
    return DispatchScenario(demand, model=model, m_trc=m_trc)
