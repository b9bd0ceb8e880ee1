"""Time-series containers, measurement corruption, fit metrics and CSV I/O."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import InsufficientData, MapeUndefined, MissingChannel, ParseError, R2Undefined

SIDES = ("supply", "return")
CSV_HEADER = ["t", "node_id", "side", "temp_c"]


@dataclass(frozen=True)
class MeasurementSet:
    """Temperatures at source and load nodes, one series per ``(node, side)``.

    ``sources`` and ``loads`` name the boundary nodes so that estimators can
    tell regressors from targets without the network description.
    """

    dt: float
    tau_amb: float
    channels: Mapping[tuple[str, str], np.ndarray]
    sources: tuple[str, ...] = ()
    loads: tuple[str, ...] = ()
    length: int = field(init=False)

    def __post_init__(self):
        chans = {}
        lengths = set()
        for key, series in self.channels.items():
            node, side = key
            if side not in SIDES:
                raise ValueError(f"side must be one of {SIDES}, got {side!r}")
            arr = np.array(series, dtype=float)
            if arr.ndim != 1:
                raise ValueError(f"channel {key} is not one-dimensional")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"channel {key} contains non-finite values")
            arr.flags.writeable = False
            chans[(str(node), side)] = arr
            lengths.add(arr.shape[0])
        if len(lengths) > 1:
            raise ValueError(f"channels have different lengths: {sorted(lengths)}")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "sources", tuple(str(s) for s in self.sources))
        object.__setattr__(self, "loads", tuple(str(v) for v in self.loads))
        object.__setattr__(self, "length", lengths.pop() if lengths else 0)

    def series(self, node: str, side: str) -> np.ndarray:
        try:
            return self.channels[(node, side)]
        except KeyError:
            raise MissingChannel(
                f"missing channel {node}/{side}", needed=1, available=0,
                channel=f"{node}/{side}",
            ) from None

    def matrix(self, nodes: Iterable[str], side: str) -> np.ndarray:
        """Stack channels as columns, shape ``(T, len(nodes))``."""
        nodes = list(nodes)
        if not nodes:
            return np.empty((self.length, 0))
        return np.column_stack([self.series(n, side) for n in nodes])

    def window(self, start: int, stop: int | None = None) -> "MeasurementSet":
        stop = self.length if stop is None else stop
        return self.replace({k: v[start:stop] for k, v in self.channels.items()})

    def replace(self, channels: Mapping[tuple[str, str], np.ndarray]) -> "MeasurementSet":
        return MeasurementSet(self.dt, self.tau_amb, channels, self.sources, self.loads)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mape: float
    r2: float

    def as_dict(self):
        return {"rmse": self.rmse, "mape": self.mape, "r2": self.r2}


def target_channels(data: MeasurementSet) -> list[tuple[str, str]]:
    """Channels an AGM predicts: load supply and source return."""
    return sorted([(v, "supply") for v in data.loads] + [(k, "return") for k in data.sources])


def _select(data: MeasurementSet, sides, nodes, channels=None):
    keys = sorted(data.channels)
    if channels is not None:
        wanted = {tuple(c) for c in channels}
        keys = [k for k in keys if k in wanted]
    if sides is not None:
        keys = [k for k in keys if k[1] in sides]
    if nodes is not None:
        nodes = set(nodes)
        keys = [k for k in keys if k[0] in nodes]
    return keys


def _rng(seed) -> np.random.Generator:
    # PCG64 seeded through SeedSequence: same stream on every platform.
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def add_gaussian_noise(data: MeasurementSet, rel_std: float, seed, *,
                       absolute: bool = False, sides=SIDES, nodes=None,
                       channels=None) -> MeasurementSet:
    """Return a copy with Gaussian measurement noise.

    By default the noise is relative, ``tau * (1 + eps)`` with
    ``eps ~ N(0, rel_std**2)``. With ``absolute=True`` ``rel_std`` is read as a
    standard deviation in degrees and added directly. Channels are visited in
    sorted ``(node, side)`` order so the result does not depend on how the set
    was assembled. ``sides``, ``nodes`` and ``channels`` restrict which
    channels are corrupted.
    """
    if rel_std < 0:
        raise ValueError("rel_std must be non-negative")
    if rel_std == 0:
        return data.replace(dict(data.channels))
    rng = _rng(seed)
    out = dict(data.channels)
    for key in _select(data, sides, nodes, channels):
        x = data.channels[key]
        eps = rng.normal(0.0, rel_std, size=x.shape)
        out[key] = x + eps if absolute else x * (1.0 + eps)
    return data.replace(out)


def add_salt_pepper(data: MeasurementSet, proportion: float, a: float = 3.0,
                    b: float = 0.3, seed=None, *, sides=SIDES, nodes=None,
                    channels=None) -> MeasurementSet:
    """Multiplicative impulse outliers.

    Each sample is independently multiplied by ``a`` with probability
    ``proportion / 2``, by ``b`` with probability ``proportion / 2`` and left
    alone otherwise.
    """
    if not 0 <= proportion < 1:
        raise ValueError("proportion must lie in [0, 1)")
    if proportion == 0:
        return data.replace(dict(data.channels))
    rng = _rng(seed)
    out = dict(data.channels)
    half = proportion / 2.0
    for key in _select(data, sides, nodes, channels):
        x = data.channels[key]
        u = rng.random(x.shape)
        y = x.copy()
        lo = u < half
        hi = (u >= half) & (u < proportion)
        y[lo] = a * x[lo]
        y[hi] = b * x[hi]
        out[key] = y
    return data.replace(out)


def rmse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return math.sqrt(float(np.mean((pred - actual) ** 2)))


def mape(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    if np.any(actual == 0):
        raise MapeUndefined("MAPE undefined: an actual value is zero")
    return float(np.mean(np.abs((pred - actual) / actual)))


def r2(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0:
        raise R2Undefined("R^2 undefined: actual series is constant")
    return 1.0 - float(np.sum((pred - actual) ** 2)) / sst


def compute_metrics(pred, actual) -> Metrics:
    """RMSE, MAPE and R^2; the sums run over all samples (divide by count)."""
    return Metrics(rmse(pred, actual), mape(pred, actual), r2(pred, actual))


def _pair(pred, actual):
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} vs {actual.shape[0]}")
    if pred.size == 0:
        raise ValueError("metrics need at least one sample")
    return pred, actual


def split(data: MeasurementSet, n_train: int, n_test: int, history: int = 0):
    """Chronological split: ``[0, n_train)`` then ``[n_train, n_train + n_test)``.

    ``history`` extra samples preceding the test block are prepended to the
    test set so lagged regressors are available for its first rows.
    """
    if n_train < 0 or n_test < 0 or history < 0:
        raise ValueError("split sizes must be non-negative")
    if n_train + n_test > data.length:
        raise InsufficientData(
            f"split needs {n_train + n_test} samples, have {data.length}",
            needed=n_train + n_test, available=data.length,
        )
    if history > n_train:
        raise InsufficientData(
            f"test history of {history} exceeds the {n_train} training samples",
            needed=history, available=n_train,
        )
    train = data.window(0, n_train)
    test = data.window(n_train - history, n_train + n_test)
    return train, test


def meta_path(path) -> str:
    return os.fspath(path) + ".meta.json"


def write_csv(data: MeasurementSet, path, *, write_meta: bool = True) -> None:
    keys = list(data.channels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for t in range(data.length):
            for node, side in keys:
                w.writerow([t, node, side, repr(float(data.channels[(node, side)][t]))])
    if write_meta:
        meta = {"dt_s": data.dt, "tau_amb_c": data.tau_amb,
                "sources": list(data.sources), "loads": list(data.loads)}
        with open(meta_path(path), "w") as fh:
            json.dump(meta, fh, indent=2)


def read_csv(path, *, dt: float | None = None, tau_amb: float | None = None,
             sources=None, loads=None) -> MeasurementSet:
    """Read the long-format measurement CSV.

    Metadata comes from the ``<path>.meta.json`` sidecar when present; explicit
    keyword arguments override it.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"measurement file {path} not found")
    meta = {}
    if os.path.exists(meta_path(path)):
        with open(meta_path(path)) as fh:
            meta = json.load(fh)
    dt = dt if dt is not None else meta.get("dt_s")
    tau_amb = tau_amb if tau_amb is not None else meta.get("tau_amb_c")
    if dt is None or tau_amb is None:
        raise ParseError("dt and tau_amb not given and no metadata sidecar found")
    sources = tuple(sources if sources is not None else meta.get("sources", ()))
    loads = tuple(loads if loads is not None else meta.get("loads", ()))

    values: dict[tuple[str, str], dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            t_s, node, side, temp_s = row
            try:
                t = int(t_s)
            except ValueError:
                raise ParseError(f"step index {t_s!r} is not an integer", line=lineno) from None
            if t < 0:
                raise ParseError("negative step index", line=lineno)
            if side not in SIDES:
                raise ParseError(f"unknown side {side!r}", line=lineno)
            try:
                temp = float(temp_s)
            except ValueError:
                raise ParseError(f"temperature {temp_s!r} is not numeric", line=lineno) from None
            if not math.isfinite(temp):
                raise ParseError("temperature is not finite", line=lineno)
            chan = values.setdefault((node, side), {})
            if t in chan:
                raise ParseError(f"duplicate row for t={t}, {node}/{side}", line=lineno)
            chan[t] = temp
    channels = {}
    lengths = set()
    for key, chan in values.items():
        n = len(chan)
        if set(chan) != set(range(n)):
            raise ParseError(f"channel {key[0]}/{key[1]} has gaps in its step index")
        channels[key] = np.array([chan[t] for t in range(n)])
        lengths.add(n)
    if len(lengths) > 1:
        raise ParseError(f"channels have different lengths: {sorted(lengths)}")
    return MeasurementSet(float(dt), float(tau_amb), channels, sources, loads)
