"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--steps 20000] [--repeat 5]
"""

import argparse
import time
from importlib import resources

import numpy as np

from dhnagm import kernels
from dhnagm.estimation import EstimatorConfig, build_regression, default_scale_floor
from dhnagm.experiments import ExperimentSpec, generate_clean
from dhnagm.measurements import add_salt_pepper, target_channels
from dhnagm.network import _side_program, build_network, load_network
from dhnagm.synthetic import random_tree_config


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--fits", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--big-loads", type=int, default=400)
    ap.add_argument("--big-steps", type=int, default=48)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the python backend is available")

    net = load_network(resources.files("dhnagm") / "data" / "seven_node.json")
    rng = np.random.default_rng(0)
    prog = _side_program(net, "supply", net.constants.tau_amb)
    inj = np.ascontiguousarray(80 + rng.normal(0, 3, (args.steps, len(net.sources))))
    big = build_network(random_tree_config(0, 3, args.big_loads))
    big_prog = _side_program(big, "supply", big.constants.tau_amb)
    big_inj = np.ascontiguousarray(80 + rng.normal(0, 3, (args.big_steps, len(big.sources))))

    spec = ExperimentSpec(n_train=400, n_test=1)
    data = generate_clean(net, spec).window(0, 400)
    data = add_salt_pepper(data, 0.1, seed=1, channels=target_channels(data))
    cfg = EstimatorConfig()
    prob = build_regression(data, "N6", {"N1": 0, "N2": 1}, cfg, gamma_cap=7)
    X, y, c = prob.design, prob.target, prob.normalization_vector
    theta0, _ = kernels._pykernels.wls_solve(X, y, np.ones_like(y), c, True, False)
    floor = default_scale_floor(y)

    rows = []
    results = {}
    for name, mod in sorted(backends.items()):
        t_sim, temps = best_of(lambda: mod.simulate_side(*prog, inj, 5.0), args.repeat)
        t_big, _ = best_of(lambda: mod.simulate_side(*big_prog, big_inj, 5.0), args.repeat)

        def fits():
            for _ in range(args.fits):
                out = mod.irls_loop(X, y, c, True, theta0, 1.345, 1.4826, floor, 1e-6, 100, False)
            return out

        t_irls, irls = best_of(fits, args.repeat)
        results[name] = (temps, irls)
        rows.append((name, t_sim, t_big, t_irls / args.fits, irls[4]))

    print(f"7-node network, {args.steps} steps | {len(big.nodes)}-node network, "
          f"{args.big_steps} steps | one IRLS fit, T=400, p={X.shape[1]}")
    print(f"{'backend':8s} {'sim long':>12s} {'sim wide':>12s} {'irls fit':>12s} {'iters':>6s}")
    for name, t_sim, t_big, t_fit, it in rows:
        print(f"{name:8s} {t_sim * 1e3:9.3f} ms {t_big * 1e3:9.3f} ms {t_fit * 1e6:9.1f} us {it:6d}")
    if len(rows) == 2:
        (_, s_c, b_c, f_c, _), (_, s_p, b_p, f_p, _) = rows
        print(f"speed-up: sim long x{s_p / s_c:.1f}, sim wide x{b_p / b_c:.1f}, "
              f"irls x{f_p / f_c:.1f}")
        (tc, ic), (tp, ip) = results["cython"], results["python"]
        print(f"max |difference|: temps {np.max(np.abs(tc - tp)):.2e}, "
              f"theta {np.max(np.abs(np.asarray(ic[0]) - np.asarray(ip[0]))):.2e}")


if __name__ == "__main__":
    main()
