"""Aggregate source-to-load model (STM/RTM) of a district heating network.

Coefficient matrices have one row per lag and one column per regressor node.
Row 0 holds the oldest lag (``gamma_cap``) and the last row lag 0, so a
history matrix with its oldest sample first is multiplied elementwise without
flipping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EmptyPath, ShapeMismatch
from .network import FlowDecomposition, NetworkModel, PipeKernelParams, trace_flow_fractions

NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True)
class PathKernel:
    coeffs: np.ndarray
    loss_offset: float
    delay: int
    pipe_count: int


def path_kernel(pipes_on_path: Sequence[PipeKernelParams]) -> PathKernel:
    """Compose the two-tap kernels of consecutive pipes by convolution.

    The result has ``len(pipes) + 1`` taps starting at the summed delay; the
    loss offset is one minus the product of the pipes' retained fractions.
    """
    if not pipes_on_path:
        raise EmptyPath("a path needs at least one pipe")
    coeffs = np.array([1.0])
    keep = 1.0
    delay = 0
    for kp in pipes_on_path:
        coeffs = np.convolve(coeffs, kp.taps)
        keep *= 1.0 - kp.eta
        delay += kp.gamma
    return PathKernel(coeffs, 1.0 - keep, delay, len(pipes_on_path))


@dataclass(frozen=True)
class AgmModel:
    """STM and RTM coefficients.

    ``stm[v]`` has shape ``(gamma_cap + 1, n_sources)``, ``rtm[k]`` shape
    ``(gamma_cap + 1, n_loads)``; ``stm_offset``/``rtm_offset`` hold the
    ambient weights. ``delays[(k, v)]`` is the first nonzero lag of the pair
    and ``widths[(k, v)]`` the band width.
    """

    sources: tuple[str, ...]
    loads: tuple[str, ...]
    gamma_cap: int
    stm: Mapping[str, np.ndarray]
    stm_offset: Mapping[str, float]
    rtm: Mapping[str, np.ndarray]
    rtm_offset: Mapping[str, float]
    delays: Mapping[tuple[str, str], int] = field(default_factory=dict)
    widths: Mapping[tuple[str, str], int] = field(default_factory=dict)
    mass_flows: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        rows = self.gamma_cap + 1
        for v, a in self.stm.items():
            if a.shape != (rows, len(self.sources)):
                raise ShapeMismatch(f"STM of {v}: shape {a.shape}, expected {(rows, len(self.sources))}")
        for k, a in self.rtm.items():
            if a.shape != (rows, len(self.loads)):
                raise ShapeMismatch(f"RTM of {k}: shape {a.shape}, expected {(rows, len(self.loads))}")

    def stm_lags(self, load: str) -> np.ndarray:
        """STM coefficients of ``load`` indexed by lag (row i = lag i)."""
        return self.stm[load][::-1]

    def rtm_lags(self, source: str) -> np.ndarray:
        return self.rtm[source][::-1]

    def normalization_residuals(self) -> dict[tuple[str, str], float]:
        """``sum(a) + b - 1`` for every STM and RTM entity."""
        out = {}
        for v, a in self.stm.items():
            out[("stm", v)] = float(a.sum() + self.stm_offset[v] - 1.0)
        for k, a in self.rtm.items():
            out[("rtm", k)] = float(a.sum() + self.rtm_offset[k] - 1.0)
        return out

    def to_dict(self) -> dict:
        def block(mats, offsets):
            return {
                node: {"shape": list(m.shape), "coeffs": m.ravel(order="F").tolist(),
                       "offset": float(offsets[node])}
                for node, m in mats.items()
            }

        return {
            "format": "agm/1",
            "row_order": "row 0 = lag gamma_cap (oldest), last row = lag 0",
            "gamma_cap": int(self.gamma_cap),
            "sources": list(self.sources),
            "loads": list(self.loads),
            "stm": block(self.stm, self.stm_offset),
            "rtm": block(self.rtm, self.rtm_offset),
            "delays": [
                {"source": k, "load": v, "delay": int(d), "width": int(self.widths.get((k, v), 0))}
                for (k, v), d in self.delays.items()
            ],
            "mass_flows": dict(self.mass_flows),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AgmModel":
        if doc.get("format") != "agm/1":
            raise ConfigError("not an AGM document (format != 'agm/1')")

        def unblock(raw):
            mats, offs = {}, {}
            for node, ent in raw.items():
                shape = tuple(ent["shape"])
                mats[node] = np.array(ent["coeffs"], dtype=float).reshape(shape, order="F")
                offs[node] = float(ent["offset"])
            return mats, offs

        stm, stm_off = unblock(doc["stm"])
        rtm, rtm_off = unblock(doc["rtm"])
        return cls(
            sources=tuple(doc["sources"]), loads=tuple(doc["loads"]),
            gamma_cap=int(doc["gamma_cap"]), stm=stm, stm_offset=stm_off,
            rtm=rtm, rtm_offset=rtm_off,
            delays={(d["source"], d["load"]): int(d["delay"]) for d in doc.get("delays", [])},
            widths={(d["source"], d["load"]): int(d["width"]) for d in doc.get("delays", [])},
            mass_flows={k: float(m) for k, m in doc.get("mass_flows", {}).items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "AgmModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def derive_agm(network: NetworkModel, flows: FlowDecomposition | None = None) -> AgmModel:
    """Analytic AGM of a tree-routed network.

    Each reachable source/load pair contributes its path kernel, scaled by the
    pair's mixing fraction and placed at its transport delay; the ambient
    weight is the fraction-weighted path loss. The return side reuses the
    supply kernels with the return fractions.
    """
    flows = flows if flows is not None else trace_flow_fractions(network)
    sources, loads = network.sources, network.loads
    if flows.sources != sources or flows.loads != loads:
        raise ValueError("flow decomposition does not match the network")

    kernels = {}
    for k in sources:
        for v in loads:
            route = network.path(k, v)
            if route is None:
                continue
            kernels[(k, v)] = path_kernel([network.kernel_params[p] for p in route])
    gamma_cap = max(kern.delay + kern.pipe_count for kern in kernels.values())
    rows = gamma_cap + 1

    stm, stm_off, rtm, rtm_off = {}, {}, {}, {}
    for iv, v in enumerate(loads):
        mat = np.zeros((rows, len(sources)))
        b = 0.0
        for ik, k in enumerate(sources):
            xi = flows.xi_s[ik, iv]
            kern = kernels.get((k, v))
            if kern is None:
                if xi > 0:
                    raise ValueError(f"load {v} draws from {k} but no path exists")
                continue
            _place(mat, ik, kern, xi, gamma_cap)
            b += xi * kern.loss_offset
        stm[v], stm_off[v] = mat, b
    for ik, k in enumerate(sources):
        mat = np.zeros((rows, len(loads)))
        b = 0.0
        for iv, v in enumerate(loads):
            xi = flows.xi_r[ik, iv]
            kern = kernels.get((k, v))
            if kern is None:
                continue
            _place(mat, iv, kern, xi, gamma_cap)
            b += xi * kern.loss_offset
        rtm[k], rtm_off[k] = mat, b

    mass_flows = {n.id: n.mass_flow for n in network.nodes if n.id in sources or n.id in loads}
    return AgmModel(
        sources=sources, loads=loads, gamma_cap=gamma_cap,
        stm=stm, stm_offset=stm_off, rtm=rtm, rtm_offset=rtm_off,
        delays={kv: kern.delay for kv, kern in kernels.items()},
        widths={kv: kern.pipe_count + 1 for kv, kern in kernels.items()},
        mass_flows=mass_flows,
    )


def _place(mat, col, kern: PathKernel, weight, gamma_cap):
    for i, a in enumerate(kern.coeffs):
        lag = kern.delay + i
        mat[gamma_cap - lag, col] = weight * a


def _check_history(history, rows, cols, what):
    h = np.asarray(history, dtype=float)
    if h.shape != (rows, cols):
        raise ShapeMismatch(f"{what} must have shape {(rows, cols)}, got {h.shape}")
    return h


def eval_stm(agm: AgmModel, source_history, tau_amb: float) -> np.ndarray:
    """Load supply temperatures for one step from a ``(gamma_cap+1, n_sources)`` history."""
    h = _check_history(source_history, agm.gamma_cap + 1, len(agm.sources), "source history")
    return np.array([np.sum(agm.stm[v] * h) + agm.stm_offset[v] * tau_amb for v in agm.loads])


def eval_rtm(agm: AgmModel, load_return_history, tau_amb: float) -> np.ndarray:
    """Source return temperatures for one step from a ``(gamma_cap+1, n_loads)`` history."""
    h = _check_history(load_return_history, agm.gamma_cap + 1, len(agm.loads), "load history")
    return np.array([np.sum(agm.rtm[k] * h) + agm.rtm_offset[k] * tau_amb for k in agm.sources])


def _filter(lag_coeffs, offset, series, tau_amb, pad):
    G = lag_coeffs.shape[0] - 1
    T = series.shape[0]
    if pad is None:
        x = series
    else:
        x = np.vstack([np.full((G, series.shape[1]), float(pad)), series])
    out = np.full(x.shape[0], offset * tau_amb)
    for j in range(series.shape[1]):
        out += np.convolve(x[:, j], lag_coeffs[:, j])[: x.shape[0]]
    if pad is None:
        out[:G] = np.nan
        return out
    return out[G:G + T]


def predict_stm(agm: AgmModel, source_series, tau_amb: float, pad: float | None = None) -> np.ndarray:
    """Apply the STM along a whole series, shape ``(T, n_loads)``.

    Steps without a full history are NaN unless ``pad`` gives a constant
    temperature for the time before the series.
    """
    x = np.asarray(source_series, dtype=float)
    if x.ndim != 2 or x.shape[1] != len(agm.sources):
        raise ShapeMismatch(f"source series must have {len(agm.sources)} columns")
    return np.column_stack(
        [_filter(agm.stm_lags(v), agm.stm_offset[v], x, tau_amb, pad) for v in agm.loads])


def predict_rtm(agm: AgmModel, load_series, tau_amb: float, pad: float | None = None) -> np.ndarray:
    x = np.asarray(load_series, dtype=float)
    if x.ndim != 2 or x.shape[1] != len(agm.loads):
        raise ShapeMismatch(f"load series must have {len(agm.loads)} columns")
    return np.column_stack(
        [_filter(agm.rtm_lags(k), agm.rtm_offset[k], x, tau_amb, pad) for k in agm.sources])


def max_coefficient_error(a: AgmModel, b: AgmModel) -> tuple[float, float]:
    """Largest absolute difference of lag coefficients and of ambient weights.

    Models may use different ``gamma_cap``; missing lags count as zero.
    """
    if a.sources != b.sources or a.loads != b.loads:
        raise ShapeMismatch("models describe different sources or loads")
    G = max(a.gamma_cap, b.gamma_cap)

    def pad(lags):
        out = np.zeros((G + 1, lags.shape[1]))
        out[:lags.shape[0]] = lags
        return out

    coef, off = 0.0, 0.0
    for v in a.loads:
        coef = max(coef, float(np.max(np.abs(pad(a.stm_lags(v)) - pad(b.stm_lags(v))))))
        off = max(off, float(abs(a.stm_offset[v] - b.stm_offset[v])))
    for k in a.sources:
        coef = max(coef, float(np.max(np.abs(pad(a.rtm_lags(k)) - pad(b.rtm_lags(k))))))
        off = max(off, float(abs(a.rtm_offset[k] - b.rtm_offset[k])))
    return coef, off


class MinSamples(NamedTuple):
    target_samples: int
    regressor_samples: int


def min_samples(n_sources: int, gamma_cap: int) -> MinSamples:
    """Smallest noise-free data set that determines one STM entity."""
    if n_sources < 1 or gamma_cap < 0:
        raise ValueError("need n_sources >= 1 and gamma_cap >= 0")
    target = (1 + gamma_cap) * n_sources + 1
    return MinSamples(target, gamma_cap + target)


def truncate_agm(agm: AgmModel, m_trc: int) -> AgmModel:
    """Keep, per column, the ``m_trc + 1`` adjacent lags carrying the most weight.

    The dropped weight is moved to the ambient offset, so the normalization
    still holds and predicted temperatures can only fall.
    """
    width = m_trc + 1
    G = agm.gamma_cap

    def cut(mats, offsets, cols, pair):
        new_m, new_b, delays, widths = {}, {}, {}, {}
        for ent, mat in mats.items():
            lags = mat[::-1].copy()
            b = offsets[ent]
            for j, col_id in enumerate(cols):
                col = lags[:, j]
                if not np.any(col):
                    continue
                sums = np.convolve(col, np.ones(width))[width - 1:]
                start = int(np.argmax(sums))
                kept = np.zeros_like(col)
                kept[start:start + width] = col[start:start + width]
                b += float(col.sum() - kept.sum())
                lags[:, j] = kept
                key = pair(ent, col_id)
                delays[key] = start
                widths[key] = width
            new_m[ent] = lags[::-1].copy()
            new_b[ent] = b
        return new_m, new_b, delays, widths

    stm, stm_off, d_s, w_s = cut(agm.stm, agm.stm_offset, agm.sources, lambda v, k: (k, v))
    rtm, rtm_off, _, _ = cut(agm.rtm, agm.rtm_offset, agm.loads, lambda k, v: (k, v))
    return AgmModel(agm.sources, agm.loads, G, stm, stm_off, rtm, rtm_off,
                    delays=d_s, widths=w_s, mass_flows=dict(agm.mass_flows))
