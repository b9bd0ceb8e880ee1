"""Boundary-input generators for simulations."""

from __future__ import annotations

import numpy as np

from .measurements import _rng

GENERATORS = ("constant", "step", "sine", "random_walk")


def constant(n: int, level: float) -> np.ndarray:
    return np.full(n, float(level))


def step(n: int, level: float, jump: float, at: int) -> np.ndarray:
    out = np.full(n, float(level))
    out[at:] += jump
    return out


def sine(n: int, level: float, amplitude: float, period: float, phase: float = 0.0) -> np.ndarray:
    t = np.arange(n)
    return level + amplitude * np.sin(2 * np.pi * t / period + phase)


def random_walk(n: int, level: float, step_std: float, seed, lo: float | None = None,
                hi: float | None = None) -> np.ndarray:
    """Gaussian random walk started at ``level``, reflected into ``[lo, hi]``."""
    rng = _rng(seed)
    out = np.empty(n)
    x = float(level)
    for t in range(n):
        out[t] = x
        x += rng.normal(0.0, step_std)
        if lo is not None and x < lo:
            x = 2 * lo - x
        if hi is not None and x > hi:
            x = 2 * hi - x
    return out


def make(spec: dict, n: int, seed=None) -> np.ndarray:
    """Build a series from ``{"kind": ..., **params}``."""
    params = dict(spec)
    kind = params.pop("kind", None)
    if kind == "constant":
        return constant(n, params["level"])
    if kind == "step":
        return step(n, params["level"], params["jump"], int(params["at"]))
    if kind == "sine":
        return sine(n, params["level"], params["amplitude"], params["period"],
                    params.get("phase", 0.0))
    if kind == "random_walk":
        return random_walk(n, params["level"], params["step_std"],
                           params.get("seed", seed), params.get("lo"), params.get("hi"))
    raise ValueError(f"unknown signal kind {kind!r}; expected one of {GENERATORS}")
