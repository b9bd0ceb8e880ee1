"""Robust identification of AGM parameters from boundary measurements.

Each STM entity (a load) or RTM entity (a source) is fitted as a linear
regression on lagged regressor temperatures plus an ambient column. The lags
of every regressor form one contiguous band starting at a prescribed delay;
delays are chosen by enumerating candidate combinations and keeping the one
with the smallest robust loss.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import kernels
from .agm import AgmModel
from .errors import DegenerateProblem, InsufficientData, NotConverged
from .measurements import MeasurementSet

AMBIENT = "ambient"
COND_LIMIT = 1e12
TIE_RTOL = 1e-9
# residual RMS below this fraction of the target RMS counts as an exact fit
TIE_EXACT = 1e-8


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator settings.

    ``scale_floor=None`` floors the MAD scale at ``1e-8 * max(1, RMS(y))``.
    ``sparsity=False`` replaces delay enumeration by one dense window of
    ``relaxed_order + 1`` lags starting at the smallest candidate delay.
    """

    m_trc: int = 4
    kappa: float = 1.345
    mad_factor: float = 1.4826
    tol: float = 1e-6
    max_iter: int = 100
    scale_floor: float | None = None
    normalization: bool = True
    sparsity: bool = True
    relaxed_order: int = 6
    loss: str = "hme"
    nonnegative: bool = False
    ridge: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.m_trc < 0 or self.relaxed_order < 0:
            raise ValueError("model order must be non-negative")
        if not self.kappa > 0 or not self.tol > 0:
            raise ValueError("kappa and tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if self.loss not in ("hme", "lse"):
            raise ValueError(f"loss must be 'hme' or 'lse', got {self.loss!r}")

    @property
    def band_width(self) -> int:
        return (self.m_trc if self.sparsity else self.relaxed_order) + 1


@dataclass(frozen=True)
class RegressionProblem:
    design: np.ndarray
    target: np.ndarray
    column_map: tuple[tuple[str, int | None], ...]
    normalization_vector: np.ndarray
    rows: np.ndarray
    entity: str
    kind: str
    delays: Mapping[str, int]
    width: int

    @property
    def regressors(self) -> tuple[str, ...]:
        return tuple(self.delays)


@dataclass(frozen=True)
class FitResult:
    """Estimated band coefficients of one entity.

    ``objective`` is the Huber objective on scaled residuals (half the residual
    sum of squares for LSE); ``score`` is the value compared across delay
    combinations, the Huber objective expressed in squared degrees.
    """

    theta: np.ndarray
    residuals: np.ndarray
    scale: float
    objective: float
    score: float
    iterations: int
    converged: bool
    weights: np.ndarray
    problem: RegressionProblem
    loss: str

    @property
    def offset(self) -> float:
        return float(self.theta[-1])

    @property
    def delays(self) -> Mapping[str, int]:
        return self.problem.delays

    def coefficients(self) -> dict[str, np.ndarray]:
        """Band coefficients per regressor, index i = lag ``delay + i``."""
        w = self.problem.width
        return {r: self.theta[j * w:(j + 1) * w].copy()
                for j, r in enumerate(self.problem.regressors)}

    def lag_coefficients(self, gamma_cap: int) -> dict[str, np.ndarray]:
        """Coefficients per regressor embedded on lags ``0..gamma_cap``."""
        out = {}
        for r, band in self.coefficients().items():
            d = self.problem.delays[r]
            if d + len(band) - 1 > gamma_cap:
                raise ValueError(f"band of {r} reaches lag {d + len(band) - 1} > {gamma_cap}")
            col = np.zeros(gamma_cap + 1)
            col[d:d + len(band)] = band
            out[r] = col
        return out


class EnumerationCounts(NamedTuple):
    k_s: int
    k_r: int
    k_sum: int


@dataclass(frozen=True)
class StmEstimate:
    best_delays: Mapping[str, int]
    fit: FitResult
    scores: Mapping[tuple[int, ...], float] = field(repr=False)
    n_fits: int = 0


def validate_candidates(candidates: Mapping[tuple[str, str], Sequence[int]]):
    out = {}
    for pair, vals in candidates.items():
        vals = tuple(int(v) for v in vals)
        if not vals:
            raise ValueError(f"empty delay candidate set for {pair}")
        if vals[0] < 0 or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"delay candidates for {pair} must be non-negative and increasing")
        out[tuple(pair)] = vals
    return out


def uniform_candidates(sources: Iterable[str], loads: Iterable[str], values: Iterable[int]):
    values = tuple(values)
    return validate_candidates({(k, v): values for k in sources for v in loads})


def build_regression(data: MeasurementSet, entity: str, delays: Mapping[str, int],
                     config: EstimatorConfig, gamma_cap: int, kind: str = "stm",
                     width: int | None = None) -> RegressionProblem:
    """Lagged design matrix for one STM (``kind='stm'``) or RTM entity.

    Rows are the steps ``gamma_cap .. T-1``, so every delay combination is
    scored on the same samples. Columns are ``width`` lags per regressor
    (``delay .. delay + width - 1``) followed by the ambient column.
    """
    width = config.band_width if width is None else width
    if kind == "stm":
        side, pool = "supply", data.sources
    elif kind == "rtm":
        side, pool = "return", data.loads
    else:
        raise ValueError(f"kind must be 'stm' or 'rtm', got {kind!r}")
    regressors = [r for r in pool if r in delays] if pool else list(delays)
    missing = set(delays) - set(regressors)
    if missing:
        raise ValueError(f"delays given for unknown regressors {sorted(missing)}")
    for r in regressors:
        d = delays[r]
        if d < 0 or d + width - 1 > gamma_cap:
            raise ValueError(f"delay {d} of {r} does not fit lags 0..{gamma_cap} with width {width}")

    y_full = data.series(entity, side)
    cols = [data.series(r, side) for r in regressors]
    T = data.length
    p = len(regressors) * width + 1
    if T - gamma_cap < p:
        raise InsufficientData(
            f"{entity}/{side}: need {gamma_cap + p} samples for {p} parameters "
            f"with gamma_cap={gamma_cap}, have {T}",
            needed=gamma_cap + p, available=T, channel=f"{entity}/{side}",
        )
    rows = np.arange(gamma_cap, T)
    X = np.empty((rows.size, p))
    column_map = []
    c = 0
    for r, x in zip(regressors, cols):
        for i in range(width):
            lag = delays[r] + i
            X[:, c] = x[gamma_cap - lag:T - lag]
            column_map.append((r, lag))
            c += 1
    X[:, -1] = data.tau_amb
    column_map.append((AMBIENT, None))
    return RegressionProblem(
        design=np.ascontiguousarray(X), target=np.ascontiguousarray(y_full[gamma_cap:]),
        column_map=tuple(column_map), normalization_vector=np.ones(p), rows=rows,
        entity=entity, kind=kind, delays={r: int(delays[r]) for r in regressors}, width=width,
    )


def _check_rank(problem: RegressionProblem, w, normalization):
    A = problem.design * np.sqrt(w)[:, None]
    if normalization:
        A = np.vstack([A, problem.normalization_vector])
    s = np.linalg.svd(A, compute_uv=False)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if s.size == 0 or s[0] == 0 or np.sum(s > tol) < problem.design.shape[1]:
        raise DegenerateProblem(
            f"{problem.kind.upper()} of {problem.entity}: design is rank deficient")


def _needs_ridge(problem: RegressionProblem, w, normalization):
    X = problem.design
    G = X.T @ (X * w[:, None])
    if normalization:
        p = G.shape[0]
        K = np.zeros((p + 1, p + 1))
        K[:p, :p] = G
        K[:p, p] = K[p, :p] = problem.normalization_vector
        G = K
    return np.linalg.cond(G) > COND_LIMIT


def _wls(problem, w, normalization, ridge_allowed):
    """Returns ``(theta, ridge_used)``."""
    _check_rank(problem, w, normalization)
    ridge = ridge_allowed and _needs_ridge(problem, w, normalization)
    theta, status = kernels.wls_solve(problem.design, problem.target, w,
                                      problem.normalization_vector, normalization, ridge)
    if status:
        raise DegenerateProblem(f"{problem.kind.upper()} of {problem.entity}: singular system")
    return np.asarray(theta), ridge


def _wls_nonneg(problem, w, normalization):
    import osqp
    import scipy.sparse as sp

    X, y = problem.design, problem.target
    p = X.shape[1]
    G = X.T @ (X * w[:, None])
    g = X.T @ (w * y)
    rows = [sp.eye(p)]
    lo, hi = [np.zeros(p)], [np.full(p, np.inf)]
    if normalization:
        rows.append(sp.csc_matrix(problem.normalization_vector[None, :]))
        lo.append([1.0])
        hi.append([1.0])
    solver = osqp.OSQP()
    solver.setup(sp.csc_matrix(G), -g, sp.vstack(rows, format="csc"),
                 np.concatenate(lo), np.concatenate(hi), verbose=False,
                 eps_abs=1e-12, eps_rel=1e-12, polishing=True, max_iter=200000)
    res = solver.solve(raise_error=False)
    if res.x is None or res.info.status not in ("solved", "solved inaccurate"):
        raise DegenerateProblem(f"non-negative fit failed: {res.info.status}")
    return np.asarray(res.x)


def solve_constrained_wls(problem: RegressionProblem, weights=None, *,
                          normalization: bool = True, ridge: bool = True,
                          nonnegative: bool = False) -> np.ndarray:
    """Minimise ``sum w_t (y_t - x_t theta)^2`` subject to ``c @ theta == 1``.

    Solved through the stationarity system ``[[X'WX, c], [c', 0]]``. A ridge
    of ``1e-10 * mean(diag(X'WX))`` is added when that system is numerically
    singular; an exactly rank-deficient design raises DegenerateProblem.
    """
    T = problem.design.shape[0]
    w = np.ones(T) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (T,):
        raise ValueError(f"weights must have length {T}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if nonnegative:
        _check_rank(problem, w, normalization)
        return _wls_nonneg(problem, w, normalization)
    return _wls(problem, w, normalization, ridge)[0]


def mad_scale(residuals, mad_factor: float = 1.4826, scale_floor: float = 0.0) -> float:
    """``max(k * median(|r - median(r)|), floor)``."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("mad_scale needs at least one residual")
    m = np.median(r)
    return max(mad_factor * float(np.median(np.abs(r - m))), scale_floor)


def huber_weight(ratio, kappa: float = 1.345):
    """IRLS weight: 1 up to ``kappa`` (inclusive), ``kappa / ratio`` beyond."""
    if np.ndim(ratio) == 0:
        return 1.0 if ratio <= kappa else kappa / ratio
    return kernels._pykernels.huber_weights(ratio, kappa)


def huber_objective(residuals, scale: float, kappa: float = 1.345) -> float:
    if not scale > 0:
        raise ValueError("scale must be positive")
    z = np.abs(np.asarray(residuals, dtype=float)) / scale
    quad = z <= kappa
    return float(np.sum(np.where(quad, 0.5 * z * z, kappa * z - 0.5 * kappa * kappa)))


def default_scale_floor(y) -> float:
    y = np.asarray(y, dtype=float)
    return 1e-8 * max(1.0, math.sqrt(float(np.mean(y * y))) if y.size else 1.0)


def irls_fit(problem: RegressionProblem, config: EstimatorConfig) -> FitResult:
    """Fit one entity with LSE or with the Huber M-estimator via IRLS.

    IRLS starts from the LSE solution and alternates Huber weights, a
    constrained weighted solve and a MAD scale refresh until the residual
    vector moves by at most ``config.tol``. Hitting ``max_iter`` raises
    NotConverged carrying the last iterate.
    """
    X, y = problem.design, problem.target
    T = y.shape[0]
    floor = config.scale_floor if config.scale_floor is not None else default_scale_floor(y)
    ones = np.ones(T)
    if config.nonnegative:
        theta0 = solve_constrained_wls(problem, ones, normalization=config.normalization,
                                       nonnegative=True)
        ridge = False
    else:
        theta0, ridge = _wls(problem, ones, config.normalization, config.ridge)

    if config.loss == "lse":
        r = y - X @ theta0
        scale = mad_scale(r, config.mad_factor, floor)
        half_ss = 0.5 * float(r @ r)
        return FitResult(theta0, r, scale, half_ss, half_ss, 0, True, ones, problem, "lse")

    if config.nonnegative:
        theta, r, scale, w, it, converged = _irls_python_nonneg(problem, config, theta0, floor)
    else:
        theta, r, scale, w, it, converged, status = kernels.irls_loop(
            X, y, problem.normalization_vector, config.normalization, theta0,
            config.kappa, config.mad_factor, floor, config.tol, config.max_iter, ridge)
        if status:
            raise DegenerateProblem(f"{problem.kind.upper()} of {problem.entity}: singular system")
    theta, r, w = np.asarray(theta), np.asarray(r), np.asarray(w)
    objective = huber_objective(r, scale, config.kappa)
    result = FitResult(theta, r, scale, objective, scale * scale * objective, int(it),
                       bool(converged), w, problem, "hme")
    if not converged:
        raise NotConverged(result)
    return result


def _irls_python_nonneg(problem, config, theta0, floor):
    X, y = problem.design, problem.target
    theta = theta0
    r = y - X @ theta
    scale = mad_scale(r, config.mad_factor, floor)
    w = np.ones_like(y)
    for it in range(1, config.max_iter + 1):
        w = huber_weight(np.abs(r) / scale, config.kappa)
        theta = _wls_nonneg(problem, w, config.normalization)
        r_new = y - X @ theta
        scale = mad_scale(r_new, config.mad_factor, floor)
        step = float(np.linalg.norm(r_new - r))
        r = r_new
        if step <= config.tol:
            return theta, r, scale, w, it, True
    return theta, r, scale, w, config.max_iter, False


def enumeration_counts(n_sources: int, n_loads: int, candidate_sizes) -> EnumerationCounts:
    """Number of estimator solves for STM enumeration, joint RTM enumeration,
    and the staged scheme (STM enumeration plus one solve per load).

    ``candidate_sizes`` is a single size used for every pair or a mapping
    ``(source_index, load_index) -> size``.
    """
    if n_sources < 1 or n_loads < 1:
        raise ValueError("need at least one source and one load")

    def size(k, v):
        if isinstance(candidate_sizes, Mapping):
            return int(candidate_sizes[(k, v)])
        return int(candidate_sizes)

    k_s = sum(math.prod(size(k, v) for k in range(n_sources)) for v in range(n_loads))
    k_r = sum(math.prod(size(k, v) for v in range(n_loads)) for k in range(n_sources))
    return EnumerationCounts(k_s, k_r, k_s + n_loads)


def _score_fit(problem, config):
    try:
        return irls_fit(problem, config)
    except NotConverged as exc:
        return exc.result


def _evaluate(data, entity, kind, delays, config, gamma_cap):
    try:
        problem = build_regression(data, entity, delays, config, gamma_cap, kind=kind)
        return _score_fit(problem, config), None
    except (DegenerateProblem, InsufficientData) as exc:
        return None, exc


def _pick(combos, fits, y):
    scores = [f.score if f is not None else math.inf for f in fits]
    best = min(scores)
    if not math.isfinite(best):
        return None, scores
    rms = math.sqrt(float(np.mean(y * y))) if y.size else 0.0
    tol = max(TIE_RTOL * best, y.size * (TIE_EXACT * rms) ** 2)
    for i, s in enumerate(scores):
        if s <= best + tol:
            return i, scores
    return None, scores  # pragma: no cover


def _map(fn, items, n_jobs):
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def default_gamma_cap(candidates, config: EstimatorConfig) -> int:
    if config.sparsity:
        return max(max(v) for v in candidates.values()) + config.m_trc
    return max(min(v) for v in candidates.values()) + config.relaxed_order


def estimate_stm(data: MeasurementSet, candidates, config: EstimatorConfig,
                 gamma_cap: int | None = None, loads: Sequence[str] | None = None
                 ) -> dict[str, StmEstimate]:
    """Delay enumeration for every load.

    All combinations of per-source candidate delays are fitted; the smallest
    score wins and near-ties (relative ``1e-9``, or exact fits) go to the
    lexicographically smallest delay tuple. With ``config.sparsity`` off the
    smallest candidate of each pair starts a dense window and nothing is
    enumerated.
    """
    candidates = validate_candidates(candidates)
    gamma_cap = default_gamma_cap(candidates, config) if gamma_cap is None else gamma_cap
    loads = tuple(loads) if loads is not None else data.loads
    sources = data.sources
    out = {}
    for v in loads:
        try:
            per_source = [candidates[(k, v)] for k in sources]
        except KeyError as exc:
            raise ValueError(f"no delay candidates for pair {exc.args[0]}") from None
        if not config.sparsity:
            per_source = [(vals[0],) for vals in per_source]
        combos = list(itertools.product(*per_source))
        results = _map(
            lambda combo: _evaluate(data, v, "stm", dict(zip(sources, combo)), config, gamma_cap),
            combos, config.n_jobs)
        fits = [f for f, _ in results]
        idx, scores = _pick(combos, fits, data.series(v, "supply")[gamma_cap:])
        if idx is None:
            errors = [e for _, e in results if e is not None]
            if errors:
                raise errors[-1]
            raise DegenerateProblem(f"no delay combination could be fitted for {v}")
        out[v] = StmEstimate(dict(zip(sources, combos[idx])), fits[idx],
                             dict(zip(combos, scores)), len(combos))
    return out


def estimate_rtm(data: MeasurementSet, stm_delays: Mapping[tuple[str, str], int],
                 config: EstimatorConfig, gamma_cap: int,
                 sources: Sequence[str] | None = None) -> dict[str, FitResult]:
    """One fit per source with the band positions transferred from the STM."""
    sources = tuple(sources) if sources is not None else data.sources
    out = {}
    for k in sources:
        try:
            delays = {v: stm_delays[(k, v)] for v in data.loads}
        except KeyError as exc:
            raise ValueError(f"no STM delay for pair {exc.args[0]}") from None
        problem = build_regression(data, k, delays, config, gamma_cap, kind="rtm")
        out[k] = _score_fit(problem, config)
    return out


def stm_delay_map(stm: Mapping[str, StmEstimate]) -> dict[tuple[str, str], int]:
    return {(k, v): d for v, est in stm.items() for k, d in est.best_delays.items()}


def coarse_fit(data: MeasurementSet, entity: str, config: EstimatorConfig,
               gamma_cap: int, kind: str = "stm") -> FitResult:
    """Band-free fit over lags ``0..gamma_cap`` for every regressor."""
    pool = data.sources if kind == "stm" else data.loads
    problem = build_regression(data, entity, {r: 0 for r in pool}, config, gamma_cap,
                               kind=kind, width=gamma_cap + 1)
    return _score_fit(problem, config)


def suggest_candidates(fit: FitResult, m_trc: int, threshold: float = 0.05) -> dict[str, tuple[int, ...]]:
    """Candidate delays per regressor from a coarse fit.

    The first lag whose coefficient exceeds ``threshold`` times the column's
    largest coefficient bounds the delay from above; candidates reach down by
    ``m_trc`` lags from there.
    """
    out = {}
    for r, band in fit.coefficients().items():
        lags = np.arange(len(band)) + fit.problem.delays[r]
        peak = np.max(np.abs(band))
        if peak == 0:
            out[r] = (0,)
            continue
        first = int(lags[np.argmax(np.abs(band) >= threshold * peak)])
        out[r] = tuple(range(max(0, first - m_trc), first + 1))
    return out


def band_violations(fit: FitResult, threshold: float = 1e-4) -> dict[str, bool]:
    """Per regressor: True when the coefficients above ``threshold`` in
    magnitude are not adjacent lags."""
    out = {}
    for r, band in fit.coefficients().items():
        idx = np.flatnonzero(np.abs(band) > threshold)
        out[r] = bool(idx.size and idx[-1] - idx[0] + 1 != idx.size)
    return out


def fits_to_agm(stm: Mapping[str, StmEstimate], rtm: Mapping[str, FitResult],
                sources: Sequence[str], loads: Sequence[str],
                gamma_cap: int | None = None, mass_flows=None) -> AgmModel:
    """Assemble estimated bands into an AgmModel on lags ``0..gamma_cap``."""
    sources, loads = tuple(sources), tuple(loads)
    reach = [d + f.problem.width - 1 for f in [e.fit for e in stm.values()] + list(rtm.values())
             for d in f.problem.delays.values()]
    G = max(reach) if gamma_cap is None else gamma_cap
    stm_m, stm_b, rtm_m, rtm_b = {}, {}, {}, {}
    delays, widths = {}, {}
    for v in loads:
        fit = stm[v].fit
        lagc = fit.lag_coefficients(G)
        stm_m[v] = np.column_stack([lagc[k] for k in sources])[::-1].copy()
        stm_b[v] = fit.offset
        for k in sources:
            delays[(k, v)] = fit.problem.delays[k]
            widths[(k, v)] = fit.problem.width
    for k in sources:
        fit = rtm[k]
        lagc = fit.lag_coefficients(G)
        rtm_m[k] = np.column_stack([lagc[v] for v in loads])[::-1].copy()
        rtm_b[k] = fit.offset
    return AgmModel(sources, loads, G, stm_m, stm_b, rtm_m, rtm_b, delays=delays,
                    widths=widths, mass_flows=dict(mass_flows or {}))


@dataclass(frozen=True)
class Identification:
    agm: AgmModel
    stm: Mapping[str, StmEstimate]
    rtm: Mapping[str, FitResult]
    gamma_cap: int


def estimate_agm(data: MeasurementSet, candidates, config: EstimatorConfig,
                 gamma_cap: int | None = None) -> Identification:
    """STM delay enumeration followed by the RTM fits on the chosen delays."""
    candidates = validate_candidates(candidates)
    gamma_cap = default_gamma_cap(candidates, config) if gamma_cap is None else gamma_cap
    stm = estimate_stm(data, candidates, config, gamma_cap)
    rtm = estimate_rtm(data, stm_delay_map(stm), config, gamma_cap)
    agm = fits_to_agm(stm, rtm, data.sources, data.loads, gamma_cap)
    return Identification(agm, stm, rtm, gamma_cap)


def fit_summary(fit: FitResult) -> dict:
    """JSON-ready description of one fit."""
    return {
        "entity": fit.problem.entity,
        "model": fit.problem.kind,
        "loss": fit.loss,
        "delays": dict(fit.problem.delays),
        "width": fit.problem.width,
        "coefficients": [
            {"regressor": r, "lag": lag, "value": float(val)}
            for (r, lag), val in zip(fit.problem.column_map[:-1], fit.theta[:-1])
        ],
        "offset": fit.offset,
        "scale": fit.scale,
        "objective": fit.objective,
        "score": fit.score,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "band_violations": band_violations(fit),
    }

