"""Command-line front end.

Exit codes: 0 success, 1 internal error, 2 input or configuration error,
3 insufficient or degenerate data.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import signals
from .agm import AgmModel, derive_agm, max_coefficient_error, truncate_agm
from .dispatch import (build_dispatch, compare_models, default_scenario, load_scenario,
                       scenario_from_dict, solution_to_dict, solve_dispatch, write_schedule_csv)
from .errors import (ConfigError, DegenerateProblem, DhnError, Infeasible, InfeasibleBounds,
                     InsufficientData, ParseError, ShapeMismatch)
from .estimation import EstimatorConfig, estimate_agm, fit_summary, uniform_candidates
from .experiments import (CHANNEL_MODES, ExperimentSpec, default_network_path, evaluate_agm,
                          load_spec, outcome_json, run_experiments, write_plot_csv,
                          write_summary_csv)
from .measurements import add_gaussian_noise, add_salt_pepper, read_csv, target_channels, write_csv
from .network import load_network, simulate

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_DATA = 0, 1, 2, 3

RECOVERY_TOL = 1e-6


def _read_config(args) -> dict:
    if not args.config:
        return {}
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    return doc


def _pick(cli_value, cfg, key, default):
    if cli_value is not None:
        return cli_value
    return cfg.get(key, default)


def _out(args, name) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _dump(args, name, doc) -> str:
    if not args.no_timestamp:
        doc = {"generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"), **doc}
    path = _out(args, name)
    with open(path, "w") as fh:
        json.dump(_clean(doc), fh, indent=2)
        fh.write("\n")
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _network(path):
    return load_network(path if path else default_network_path())


def _parse_candidates(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigError("no candidate delays given")
    return tuple(out)


def _signal(text, cfg, key, default):
    if text is not None:
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--{key.replace('_', '-')}: {exc}") from None
    return cfg.get(key, default)


def cmd_simulate(args) -> int:
    cfg = _read_config(args)
    net = _network(args.network or cfg.get("network"))
    steps = int(_pick(args.steps, cfg, "steps", 500))
    warmup = int(_pick(args.warmup, cfg, "warmup", 40))
    if args.inputs:
        inp = read_csv(args.inputs)
        src = {k: inp.series(k, "supply") for k in net.sources}
        ret = {v: inp.series(v, "return") for v in net.loads}
        total = inp.length
    else:
        spec = ExperimentSpec()
        s_sig = _signal(args.source_signal, cfg, "source_signal", dict(spec.source_signal))
        l_sig = _signal(args.load_signal, cfg, "load_signal", dict(spec.load_signal))
        total = steps + warmup
        src = {k: signals.make(s_sig, total, [args.seed, i]) for i, k in enumerate(net.sources)}
        ret = {v: signals.make(l_sig, total, [args.seed, 1000 + i])
               for i, v in enumerate(net.loads)}
    if warmup >= total:
        raise InsufficientData(f"warm-up of {warmup} leaves no samples out of {total}",
                               needed=warmup + 1, available=total)
    init = _pick(args.initial_temp, cfg, "initial_temp", None)
    data = simulate(net, src, ret, initial_temp=init).window(warmup)
    path = _out(args, args.output)
    write_csv(data, path)
    print(path)
    return EXIT_OK


def cmd_derive(args) -> int:
    net = _network(args.network)
    agm = derive_agm(net)
    if args.m_trc is not None:
        agm = truncate_agm(agm, args.m_trc)
    path = _out(args, args.output)
    agm.save(path)
    print(path)
    return EXIT_OK


def _estimator_config(args, cfg) -> EstimatorConfig:
    opts = dict(cfg.get("estimator", {}))
    for key, val in (("m_trc", args.m_trc), ("loss", args.loss), ("relaxed_order", args.order),
                     ("n_jobs", args.jobs), ("kappa", args.kappa), ("tol", args.tol),
                     ("max_iter", args.max_iter)):
        if val is not None:
            opts[key] = val
    if args.no_normalization:
        opts["normalization"] = False
    if args.no_sparsity:
        opts["sparsity"] = False
    if args.nonnegative:
        opts["nonnegative"] = True
    try:
        return EstimatorConfig(**opts)
    except TypeError as exc:
        raise ConfigError(f"invalid estimator settings: {exc}") from None


def _metrics_doc(ev):
    return {f"{n}/{s}": m.as_dict() for (n, s), m in sorted(ev.metrics.items())}


def cmd_estimate(args) -> int:
    cfg = _read_config(args)
    data = read_csv(args.data)
    config = _estimator_config(args, cfg)
    cand_values = _parse_candidates(_pick(args.candidates, cfg, "candidates", "0-3"))
    if not data.sources or not data.loads:
        raise ConfigError("measurement metadata must list sources and loads")
    n_test = int(_pick(args.n_test, cfg, "n_test", 0))
    n_train = int(_pick(args.n_train, cfg, "n_train", data.length - n_test))
    if n_train + n_test > data.length:
        raise InsufficientData(f"need {n_train + n_test} samples, have {data.length}",
                               needed=n_train + n_test, available=data.length)
    train = data.window(0, n_train)
    cand = uniform_candidates(data.sources, data.loads, cand_values)
    ident = estimate_agm(train, cand, config, args.gamma_cap)
    G = ident.gamma_cap
    report = {
        "loss": config.loss, "m_trc": config.m_trc, "normalization": config.normalization,
        "sparsity": config.sparsity, "gamma_cap": G, "candidates": list(cand_values),
        "n_train": n_train, "n_test": n_test,
        "stm": {v: {**fit_summary(e.fit), "combinations": e.n_fits}
                for v, e in ident.stm.items()},
        "rtm": {k: fit_summary(f) for k, f in ident.rtm.items()},
        "train_metrics": _metrics_doc(evaluate_agm(ident.agm, train, G)),
    }
    if n_test:
        if n_train < G:
            raise InsufficientData("training block shorter than the lag window",
                                   needed=G, available=n_train)
        test = data.window(n_train - G, n_train + n_test)
        report["test_metrics"] = _metrics_doc(evaluate_agm(ident.agm, test, G))
    if args.truth:
        truth = derive_agm(load_network(args.truth))
        coef, off = max_coefficient_error(ident.agm, truth)
        report["recovery"] = {"max_coef_error": coef, "max_offset_error": off,
                              "exact_match": max(coef, off) <= RECOVERY_TOL,
                              "tolerance": RECOVERY_TOL}
    ident.agm.save(_out(args, args.agm_output))
    print(_dump(args, args.output, report))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    agm = AgmModel.load(args.agm)
    data = read_csv(args.data)
    if data.length <= agm.gamma_cap:
        raise InsufficientData(f"need more than {agm.gamma_cap} samples, have {data.length}",
                               needed=agm.gamma_cap + 1, available=data.length)
    ev = evaluate_agm(agm, data)
    write_plot_csv(ev, _out(args, args.predictions))
    print(_dump(args, args.output, {"metrics": _metrics_doc(ev), "history": ev.start}))
    return EXIT_OK


def cmd_perturb(args) -> int:
    data = read_csv(args.data)
    chans = {m: (None if m == "all" else target_channels(data)) for m in CHANNEL_MODES}
    out = add_gaussian_noise(data, args.noise_std, [args.seed, 1], absolute=args.absolute,
                             channels=chans[args.noise_channels])
    out = add_salt_pepper(out, args.outliers, args.a, args.b, [args.seed, 2],
                          channels=chans[args.outlier_channels])
    path = _out(args, args.output)
    write_csv(out, path)
    print(path)
    return EXIT_OK


def cmd_dispatch(args) -> int:
    cfg = _read_config(args)
    net = _network(args.network)
    if args.scenario:
        scenario = load_scenario(args.scenario)
    elif cfg:
        scenario = scenario_from_dict(cfg)
    else:
        scenario = default_scenario(net, args.horizon)
    model = args.model or scenario.model
    if model == "both":
        cmp = compare_models(net, scenario, repeats=args.repeats)
        doc = {k: v for k, v in cmp.as_dict().items() if k != "times"}
        if not args.no_timestamp:
            doc["times"] = cmp.as_dict()["times"]
        for name, sol in (("node_method", cmp.node), ("agm", cmp.agm)):
            prob = build_dispatch(net if name == "node_method" else _agm_for(net, scenario),
                                  scenario, net.constants)
            write_schedule_csv(sol, prob, _out(args, f"schedule_{name}.csv"),
                               scenario.chp.power_ratio)
        print(_dump(args, args.output, doc))
        return EXIT_OK
    target = net if model == "node_method" else _agm_for(net, scenario)
    prob = build_dispatch(target, scenario, net.constants)
    sol = solve_dispatch(prob)
    doc = solution_to_dict(sol, prob)
    if args.no_timestamp:
        doc.pop("solve_time_s")
    write_schedule_csv(sol, prob, _out(args, f"schedule_{model}.csv"), scenario.chp.power_ratio)
    print(_dump(args, args.output, doc))
    return EXIT_OK


def _agm_for(net, scenario):
    agm = derive_agm(net)
    return truncate_agm(agm, scenario.m_trc) if scenario.m_trc is not None else agm


def cmd_run_tests(args) -> int:
    spec = load_spec(args.config) if args.config else ExperimentSpec()
    if args.network:
        spec = ExperimentSpec.from_dict({**spec.to_dict(), "network": args.network})
    if args.seed_given:
        spec = ExperimentSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    outcomes = run_experiments(spec, args.tests)
    write_summary_csv(outcomes, _out(args, "summary.csv"))
    for o in outcomes:
        if o.evaluation is not None:
            write_plot_csv(o.evaluation, _out(args, f"plot_test{o.setting.id}.csv"))
    _dump(args, "summary.json", {"spec": spec.to_dict(),
                                 "tests": [outcome_json(o) for o in outcomes]})
    for o in outcomes:
        r = o.row()
        print(f"test {r['test']}: {r['status']} rmse={r['rmse_mean']:.4g} r2_min={r['r2_min']:.4g} "
              f"coef_err={r['max_coef_error']:.3g} offset_err={r['max_offset_error']:.3g}"
              + (f" band_violations={r['band_violations']}" if r["band_violations"] else "")
              + (f" error={r['error']}" if r["error"] else ""))
    return EXIT_OK


def _global_flags(parser, suppress):
    # subcommands accept the same flags; SUPPRESS keeps them from resetting top-level values
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="RNG seed (default 0)")
    parser.add_argument("--out-dir", default=d("."), help="directory for outputs")
    parser.add_argument("--config", default=d(None), help="JSON settings for the command")
    parser.add_argument("--no-timestamp", action="store_true", default=d(False),
                        help="omit wall-clock fields so reruns are byte-identical")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    p = argparse.ArgumentParser(prog="dhnagm",
                                description="District heating aggregate-model toolkit")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="node-method simulation to CSV")
    s.add_argument("--network")
    s.add_argument("--steps", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--inputs", help="CSV with source supply and load return channels")
    s.add_argument("--source-signal", help='JSON, e.g. {"kind": "sine", "level": 85, ...}')
    s.add_argument("--load-signal")
    s.add_argument("--initial-temp", type=float)
    s.add_argument("--output", default="measurements.csv")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("derive-agm", parents=[common], help="analytic AGM of a network")
    s.add_argument("--network")
    s.add_argument("--m-trc", type=int)
    s.add_argument("--output", default="agm.json")
    s.set_defaults(func=cmd_derive)

    s = sub.add_parser("estimate", parents=[common], help="identify an AGM from measurements")
    s.add_argument("--data", required=True)
    s.add_argument("--candidates", help="delay candidates, e.g. 0-3 or 0,1,2")
    s.add_argument("--m-trc", type=int)
    s.add_argument("--order", type=int, help="lags per regressor when sparsity is off, minus one")
    s.add_argument("--loss", choices=("hme", "lse"))
    s.add_argument("--no-normalization", action="store_true")
    s.add_argument("--no-sparsity", action="store_true")
    s.add_argument("--nonnegative", action="store_true")
    s.add_argument("--kappa", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--gamma-cap", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--truth", help="network file whose derived AGM is the reference")
    s.add_argument("--output", default="fit_report.json")
    s.add_argument("--agm-output", default="agm_estimated.json")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", parents=[common], help="score an AGM on measurements")
    s.add_argument("--agm", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--output", default="metrics.json")
    s.add_argument("--predictions", default="predictions.csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("perturb", parents=[common], help="add noise and outliers")
    s.add_argument("--data", required=True)
    s.add_argument("--noise-std", type=float, default=0.0)
    s.add_argument("--absolute", action="store_true", help="noise std in degrees")
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--a", type=float, default=3.0)
    s.add_argument("--b", type=float, default=0.3)
    s.add_argument("--noise-channels", choices=CHANNEL_MODES, default="all")
    s.add_argument("--outlier-channels", choices=CHANNEL_MODES, default="all")
    s.add_argument("--output", default="perturbed.csv")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("dispatch", parents=[common], help="economic dispatch")
    s.add_argument("--network")
    s.add_argument("--scenario")
    s.add_argument("--model", choices=("node_method", "agm", "both"))
    s.add_argument("--horizon", type=int, default=24)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--output", default="dispatch_report.json")
    s.set_defaults(func=cmd_dispatch)

    s = sub.add_parser("run-tests", parents=[common], help="run the identification test matrix")
    s.add_argument("--network")
    s.add_argument("--tests", type=int, nargs="+")
    s.set_defaults(func=cmd_run_tests)
    return p


def _exit_code(exc) -> int:
    if isinstance(exc, (InsufficientData, DegenerateProblem)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, ParseError, ShapeMismatch, InfeasibleBounds, Infeasible,
                        FileNotFoundError, IsADirectoryError, json.JSONDecodeError, ValueError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (DhnError, OSError, ValueError) as exc:
        code = _exit_code(exc)
        detail = ""
        if isinstance(exc, InsufficientData) and exc.channel:
            detail = f" [channel {exc.channel}]"
        print(f"dhnagm: error: {type(exc).__name__}: {exc}{detail}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001
        print(f"dhnagm: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
