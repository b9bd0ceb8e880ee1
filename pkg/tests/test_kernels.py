import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhnagm import build_network, kernels
from dhnagm.network import _side_program
from dhnagm.synthetic import random_tree_config

BACKENDS = kernels.available_backends()


def test_python_backend_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


def test_pure_python_switch():
    code = "import dhnagm.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, DHNAGM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"


needs_c = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


@needs_c
@pytest.mark.parametrize("seed", range(5))
def test_simulate_parity(seed):
    net = build_network(random_tree_config(seed, n_sources=3, n_loads=9))
    rng = np.random.default_rng(seed)
    for side, n in (("supply", 3), ("return", 9)):
        prog = _side_program(net, side, 5.0)
        inj = np.ascontiguousarray(rng.uniform(30, 90, (50, n)))
        a = BACKENDS["python"].simulate_side(*prog, inj, 5.0)
        b = BACKENDS["cython"].simulate_side(*prog, inj, 5.0)
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def _problem(seed, T=120, p=6):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.normal(60, 10, (T, p - 1)), np.full(T, 5.0)])
    theta = rng.dirichlet(np.ones(p))
    y = X @ theta + rng.standard_t(2, T)
    return np.ascontiguousarray(X), y, theta


@needs_c
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), constrained=st.booleans(), ridge=st.booleans())
def test_wls_parity(seed, constrained, ridge):
    X, y, _ = _problem(seed)
    w = np.random.default_rng(seed + 1).uniform(0.05, 1, X.shape[0])
    c = np.ones(X.shape[1])
    ta, sa = BACKENDS["python"].wls_solve(X, y, w, c, constrained, ridge)
    tb, sb = BACKENDS["cython"].wls_solve(X, y, w, c, constrained, ridge)
    assert sa == sb == 0
    np.testing.assert_allclose(ta, tb, atol=1e-9, rtol=1e-9)


@needs_c
@pytest.mark.parametrize("seed", range(6))
def test_irls_parity(seed):
    X, y, _ = _problem(seed, T=101 + seed)
    c = np.ones(X.shape[1])
    theta0 = np.asarray(BACKENDS["python"].wls_solve(X, y, np.ones(X.shape[0]), c, True, False)[0])
    args = (X, y, c, True, theta0, 1.345, 1.4826, 1e-8, 1e-10, 200, False)
    ra = BACKENDS["python"].irls_loop(*args)
    rb = BACKENDS["cython"].irls_loop(*args)
    np.testing.assert_allclose(ra[0], rb[0], atol=1e-8)
    assert ra[2] == pytest.approx(rb[2], rel=1e-8)
    assert ra[4] == rb[4] and ra[5] == rb[5]


@needs_c
@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 80), seed=st.integers(0, 10_000), ties=st.booleans())
def test_median_parity_through_mad(n, seed, ties):
    # a single IRLS pass returns the MAD scale of the residuals, a window onto the C median
    rng = np.random.default_rng(seed)
    r = rng.integers(-3, 4, n).astype(float) if ties else rng.normal(size=n)
    X = np.ones((n, 1))
    c = np.ones(1)
    out = BACKENDS["cython"].irls_loop(X, r, c, False, np.zeros(1), 1.345, 1.4826, 0.0, 1e300, 0, False)
    expect = BACKENDS["python"].mad(r, 1.4826, 0.0)
    assert out[2] == pytest.approx(expect, abs=1e-15, rel=1e-15)


def test_singular_reported():
    X = np.ascontiguousarray(np.column_stack([np.ones(10), np.ones(10)]))
    for mod in BACKENDS.values():
        _, status = mod.wls_solve(X, np.ones(10), np.ones(10), np.ones(2), False, False)
        assert status == kernels.SINGULAR
