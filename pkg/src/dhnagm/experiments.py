"""Identification test matrix: simulate, corrupt, estimate and score.

The default matrix has six settings: noise-free data, Gaussian noise, two
outlier levels, relaxed normalization and relaxed sparsity.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from . import signals
from .agm import AgmModel, derive_agm, max_coefficient_error, predict_rtm, predict_stm
from .errors import ConfigError, DhnError, MapeUndefined, R2Undefined
from .estimation import EstimatorConfig, Identification, band_violations, estimate_agm, uniform_candidates
from .measurements import (MeasurementSet, Metrics, add_gaussian_noise, add_salt_pepper,
                           compute_metrics, target_channels)
from .network import NetworkModel, build_network, load_network, simulate

CHANNEL_MODES = ("all", "targets")


def default_network_path():
    return resources.files("dhnagm") / "data" / "seven_node.json"


@dataclass(frozen=True)
class TestSetting:
    __test__ = False  # keep pytest from collecting it

    id: int
    noise_std: float = 0.0
    outliers: float = 0.0
    normalization: bool = True
    sparsity: bool = True
    order: int = 4


TABLE = (
    TestSetting(1),
    TestSetting(2, 0.01),
    TestSetting(3, 0.01, 0.10),
    TestSetting(4, 0.01, 0.20),
    TestSetting(5, 0.01, 0.10, normalization=False),
    TestSetting(6, 0.01, 0.10, sparsity=False, order=6),
)


@dataclass(frozen=True)
class ExperimentSpec:
    """Test matrix plus everything needed to regenerate its data.

    ``outlier_channels`` and ``noise_channels`` are ``"all"`` or
    ``"targets"`` (load supply and source return only).
    """

    network: str | None = None
    tests: tuple[TestSetting, ...] = TABLE
    seed: int = 0
    n_train: int = 400
    n_test: int = 100
    warmup: int = 40
    candidates: tuple[int, ...] = (0, 1, 2, 3)
    m_trc: int = 4
    noise_channels: str = "all"
    outlier_channels: str = "targets"
    source_signal: Mapping = field(default_factory=lambda: {
        "kind": "random_walk", "level": 85.0, "step_std": 3.0, "lo": 65.0, "hi": 105.0})
    load_signal: Mapping = field(default_factory=lambda: {
        "kind": "random_walk", "level": 45.0, "step_std": 2.0, "lo": 30.0, "hi": 60.0})
    estimator: Mapping = field(default_factory=dict)

    def __post_init__(self):
        ids = [t.id for t in self.tests]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"test ids must be unique, got {ids}")
        for mode in (self.noise_channels, self.outlier_channels):
            if mode not in CHANNEL_MODES:
                raise ConfigError(f"channel mode must be one of {CHANNEL_MODES}, got {mode!r}")
        if self.n_train < 1 or self.n_test < 1 or self.warmup < 0:
            raise ConfigError("n_train and n_test must be positive, warmup non-negative")
        if not self.candidates:
            raise ConfigError("candidate delays must not be empty")

    def load_network(self) -> NetworkModel:
        path = self.network if self.network is not None else default_network_path()
        if self.network is not None and not os.path.exists(path):
            raise ConfigError(f"network file {path} does not exist")
        return load_network(path)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["tests"] = [asdict(t) for t in self.tests]
        doc["candidates"] = list(self.candidates)
        doc["source_signal"] = dict(self.source_signal)
        doc["load_signal"] = dict(self.load_signal)
        doc["estimator"] = dict(self.estimator)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentSpec":
        doc = dict(doc)
        try:
            if "tests" in doc:
                doc["tests"] = tuple(TestSetting(**t) for t in doc["tests"])
            if "candidates" in doc:
                doc["candidates"] = tuple(int(c) for c in doc["candidates"])
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"invalid experiment spec: {exc}") from None


def generate_clean(network: NetworkModel, spec: ExperimentSpec, seed=None) -> MeasurementSet:
    """Noise-free node-method data, ``n_train + n_test`` steps after warm-up."""
    seed = spec.seed if seed is None else seed
    T = spec.warmup + spec.n_train + spec.n_test
    src = {k: signals.make(spec.source_signal, T, [seed, i])
           for i, k in enumerate(network.sources)}
    ret = {v: signals.make(spec.load_signal, T, [seed, 1000 + i])
           for i, v in enumerate(network.loads)}
    return simulate(network, src, ret).window(spec.warmup)


def _channels(data, mode):
    return None if mode == "all" else target_channels(data)


def corrupt(train: MeasurementSet, setting: TestSetting, spec: ExperimentSpec, seed=None):
    seed = spec.seed if seed is None else seed
    out = add_gaussian_noise(train, setting.noise_std, [seed, setting.id, 1],
                             channels=_channels(train, spec.noise_channels))
    return add_salt_pepper(out, setting.outliers, seed=[seed, setting.id, 2],
                           channels=_channels(train, spec.outlier_channels))


def config_for(setting: TestSetting, spec: ExperimentSpec, **overrides) -> EstimatorConfig:
    opts = dict(m_trc=spec.m_trc, normalization=setting.normalization,
                sparsity=setting.sparsity, relaxed_order=setting.order)
    opts.update(spec.estimator)
    opts.update(overrides)
    return EstimatorConfig(**opts)


@dataclass(frozen=True)
class Evaluation:
    metrics: Mapping[tuple[str, str], Metrics]
    actual: Mapping[tuple[str, str], np.ndarray]
    predicted: Mapping[tuple[str, str], np.ndarray]
    start: int

    def mean(self, name) -> float:
        vals = [getattr(m, name) for m in self.metrics.values()]
        return float(np.mean(vals)) if vals else math.nan

    def worst_r2(self) -> float:
        return float(min(m.r2 for m in self.metrics.values()))


def _safe_metrics(pred, actual):
    try:
        return compute_metrics(pred, actual)
    except (MapeUndefined, R2Undefined):
        from .measurements import mape, r2, rmse

        def guard(fn):
            try:
                return fn(pred, actual)
            except (MapeUndefined, R2Undefined):
                return math.nan

        return Metrics(rmse(pred, actual), guard(mape), guard(r2))


def evaluate_agm(agm: AgmModel, data: MeasurementSet, history: int | None = None) -> Evaluation:
    """Score one-step AGM predictions against ``data``.

    The first ``history`` samples (default ``gamma_cap``) only feed the lags
    and are not scored.
    """
    G = agm.gamma_cap if history is None else history
    if G < agm.gamma_cap:
        raise ValueError("history shorter than the model's lag window")
    ps = predict_stm(agm, data.matrix(agm.sources, "supply"), data.tau_amb)
    pr = predict_rtm(agm, data.matrix(agm.loads, "return"), data.tau_amb)
    actual, pred, metrics = {}, {}, {}
    for j, v in enumerate(agm.loads):
        key = (v, "supply")
        actual[key], pred[key] = data.series(v, "supply")[G:], ps[G:, j]
    for j, k in enumerate(agm.sources):
        key = (k, "return")
        actual[key], pred[key] = data.series(k, "return")[G:], pr[G:, j]
    for key in actual:
        metrics[key] = _safe_metrics(pred[key], actual[key])
    return Evaluation(metrics, actual, pred, G)


@dataclass(frozen=True)
class TestOutcome:
    setting: TestSetting
    status: str
    error: str = ""
    identification: Identification | None = None
    evaluation: Evaluation | None = None
    coef_error: float = math.nan
    offset_error: float = math.nan
    violations: tuple[tuple[str, str], ...] = ()

    def row(self) -> dict:
        s = self.setting
        ev = self.evaluation
        return {
            "test": s.id, "noise_std": s.noise_std, "outliers": s.outliers,
            "normalization": s.normalization, "sparsity": s.sparsity, "order": s.order,
            "status": self.status,
            "rmse_mean": ev.mean("rmse") if ev else math.nan,
            "mape_mean": ev.mean("mape") if ev else math.nan,
            "r2_min": ev.worst_r2() if ev else math.nan,
            "max_coef_error": self.coef_error, "max_offset_error": self.offset_error,
            "band_violations": ";".join(f"{e}<-{r}" for e, r in self.violations),
            "error": self.error,
        }


def run_test(setting: TestSetting, spec: ExperimentSpec, network: NetworkModel,
             clean: MeasurementSet, truth: AgmModel | None = None, **overrides) -> TestOutcome:
    truth = truth if truth is not None else derive_agm(network)
    try:
        train = corrupt(clean.window(0, spec.n_train), setting, spec)
        cfg = config_for(setting, spec, **overrides)
        cand = uniform_candidates(network.sources, network.loads, spec.candidates)
        ident = estimate_agm(train, cand, cfg)
        G = ident.gamma_cap
        if G > spec.n_train:
            raise ConfigError("lag window longer than the training block")
        test = clean.window(spec.n_train - G, spec.n_train + spec.n_test)
        ev = evaluate_agm(ident.agm, test, G)
        coef, off = max_coefficient_error(ident.agm, truth)
        viol = []
        for v, est in ident.stm.items():
            viol += [(v, r) for r, bad in band_violations(est.fit).items() if bad]
        for k, fit in ident.rtm.items():
            viol += [(k, r) for r, bad in band_violations(fit).items() if bad]
        return TestOutcome(setting, "ok", "", ident, ev, coef, off, tuple(viol))
    except DhnError as exc:
        return TestOutcome(setting, "failed", f"{type(exc).__name__}: {exc}")


def run_experiments(spec: ExperimentSpec, tests: Sequence[int] | None = None) -> list[TestOutcome]:
    network = spec.load_network()
    truth = derive_agm(network)
    clean = generate_clean(network, spec)
    chosen = [t for t in spec.tests if tests is None or t.id in tests]
    return [run_test(t, spec, network, clean, truth) for t in chosen]


SUMMARY_FIELDS = ("test", "noise_std", "outliers", "normalization", "sparsity", "order", "status",
                  "rmse_mean", "mape_mean", "r2_min", "max_coef_error", "max_offset_error",
                  "band_violations", "error")


def write_summary_csv(outcomes: Sequence[TestOutcome], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for o in outcomes:
            w.writerow({k: _fmt(v) for k, v in o.row().items()})


def write_plot_csv(evaluation: Evaluation, path) -> None:
    """Long format: ``t,node_id,side,actual,predicted``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node_id", "side", "actual", "predicted"])
        for (node, side) in sorted(evaluation.actual):
            a, p = evaluation.actual[(node, side)], evaluation.predicted[(node, side)]
            for t in range(a.shape[0]):
                w.writerow([t + evaluation.start, node, side, repr(float(a[t])), repr(float(p[t]))])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def outcome_json(o: TestOutcome) -> dict:
    doc = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in o.row().items()}
    if o.evaluation is not None:
        doc["metrics"] = {f"{n}/{s}": m.as_dict() for (n, s), m in o.evaluation.metrics.items()}
    if o.identification is not None:
        doc["delays"] = {f"{k}->{v}": d for v, est in o.identification.stm.items()
                         for k, d in est.best_delays.items()}
        doc["offsets"] = {"stm": dict(o.identification.agm.stm_offset),
                          "rtm": dict(o.identification.agm.rtm_offset)}
    return doc


def load_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ExperimentSpec.from_dict(doc)
