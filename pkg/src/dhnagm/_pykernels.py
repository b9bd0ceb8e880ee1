"""Pure-Python/numpy implementations of the hot kernels.

These define the reference semantics; ``_ckernels.pyx`` must agree with them
to round-off.
"""

from __future__ import annotations

import numpy as np

SINGULAR = 1


def simulate_side(order, inj_col, inj_flow, in_ptr, in_pipe, pipe_from,
                  pipe_gamma, pipe_c0, pipe_c1, pipe_flow, pipe_loss,
                  injections, init):
    """Propagate temperatures through one side (supply or return) of a DHN.

    Nodes are visited in topological order, so every upstream series is
    complete before it is needed and each node can be computed for all time
    steps at once.

    Returns
    -------
    ndarray, shape (T, n_nodes)
        Mixed node temperature for every step.
    """
    injections = np.asarray(injections, dtype=float)
    T = injections.shape[0]
    n_nodes = len(order)
    temps = np.empty((T, n_nodes))
    for n in order:
        acc = np.zeros(T)
        total = 0.0
        if inj_col[n] >= 0:
            acc += inj_flow[n] * injections[:, inj_col[n]]
            total += inj_flow[n]
        for q in range(in_ptr[n], in_ptr[n + 1]):
            j = in_pipe[q]
            upstream = temps[:, pipe_from[j]]
            g = int(pipe_gamma[j])
            outlet = (pipe_c0[j] * _lag(upstream, g, init)
                      + pipe_c1[j] * _lag(upstream, g + 1, init)
                      + pipe_loss[j])
            acc += pipe_flow[j] * outlet
            total += pipe_flow[j]
        temps[:, n] = acc / total
    return temps


def _lag(x, d, fill):
    if d == 0:
        return x
    out = np.full_like(x, fill)
    if d < len(x):
        out[d:] = x[:-d]
    return out


def median(x):
    return float(np.median(x))


def mad(r, mad_factor, floor):
    m = np.median(r)
    return max(mad_factor * float(np.median(np.abs(r - m))), floor)


def huber_weights(ratio, kappa):
    ratio = np.asarray(ratio, dtype=float)
    w = np.ones_like(ratio)
    big = ratio > kappa
    w[big] = kappa / ratio[big]
    return w


def wls_solve(X, y, w, c, use_constraint, ridge):
    """Weighted LS, optionally with the equality ``c @ theta == 1``.

    Returns ``(theta, status)``; status is 0 or SINGULAR.
    """
    Xw = X * w[:, None]
    G = X.T @ Xw
    g = Xw.T @ y
    p = G.shape[0]
    if ridge:
        G = G + 1e-10 * np.mean(np.diag(G)) * np.eye(p)
    if use_constraint:
        K = np.zeros((p + 1, p + 1))
        K[:p, :p] = G
        K[:p, p] = c
        K[p, :p] = c
        rhs = np.concatenate([g, [1.0]])
    else:
        K, rhs = G, g
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return np.full(p, np.nan), SINGULAR
    return sol[:p], 0


def irls_loop(X, y, c, use_constraint, theta0, kappa, mad_factor,
              scale_floor, tol, max_iter, ridge):
    """Huber IRLS iterations starting from ``theta0``.

    Returns ``(theta, residuals, scale, weights, iterations, converged, status)``.
    """
    theta = np.array(theta0, dtype=float)
    r = y - X @ theta
    scale = mad(r, mad_factor, scale_floor)
    w = np.ones_like(y)
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        w = huber_weights(np.abs(r) / scale, kappa)
        theta_new, status = wls_solve(X, y, w, c, use_constraint, ridge)
        if status:
            return theta, r, scale, w, it, False, status
        theta = theta_new
        r_new = y - X @ theta
        scale = mad(r_new, mad_factor, scale_floor)
        step = float(np.linalg.norm(r_new - r))
        r = r_new
        if step <= tol:
            converged = True
            break
    return theta, r, scale, w, it, converged, 0
