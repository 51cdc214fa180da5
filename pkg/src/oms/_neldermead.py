"""Lean Nelder-Mead with box clipping.

Same moves and termination rule as the SciPy implementation (reflection,
expansion, contraction, shrink; adaptive coefficients in higher dimension;
stop when both the vertex spread and the value spread are below tolerance)
but tuned for objectives that cost microseconds and run thousands of times
per Monte Carlo episode: vertices stay sorted by insertion and the centroid
is updated incrementally.
"""

from __future__ import annotations

import numpy as np


def minimize_box(fn, x0: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                 fatol: float = 1e-12, xatol: float = 1e-9,
                 maxiter: int = 2000) -> tuple[np.ndarray, float, int, bool]:
    """Minimize fn over a box; returns (x, f, iterations, converged)."""
    n = len(x0)
    if n > 3:
        # adaptive coefficients (Gao & Han) help in higher dimension
        rho, chi, psi, sigma = 1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), 1.0 - 1.0 / n
    else:
        rho, chi, psi, sigma = 1.0, 2.0, 0.5, 0.5

    def clip(x):
        return np.minimum(np.maximum(x, lower), upper)

    sim = np.empty((n + 1, n))
    sim[0] = clip(np.asarray(x0, dtype=float))
    nonzdelt, zdelt = 0.05, 0.00025
    for k in range(n):
        y = sim[0].copy()
        y[k] = (1 + nonzdelt) * y[k] if y[k] != 0.0 else zdelt
        sim[k + 1] = clip(y)
    fsim = np.array([fn(sim[k]) for k in range(n + 1)])
    order = np.argsort(fsim, kind="stable")
    sim, fsim = sim[order], fsim[order]
    total = sim.sum(axis=0)

    def replace_worst(x, f):
        # drop the worst vertex, insert (x, f) keeping ascending f order
        nonlocal total
        total += x - sim[-1]
        pos = int(np.searchsorted(fsim[:-1], f, side="right"))
        if pos < n:
            sim[pos + 1:] = sim[pos:-1].copy()
            fsim[pos + 1:] = fsim[pos:-1].copy()
        sim[pos] = x
        fsim[pos] = f

    it = 0
    converged = False
    while it < maxiter:
        it += 1
        if (fsim[-1] - fsim[0] <= fatol
                and np.max(np.abs(sim[1:] - sim[0])) <= xatol):
            converged = True
            break
        centroid = (total - sim[-1]) / n
        xr = clip(centroid + rho * (centroid - sim[-1]))
        fr = fn(xr)
        if fr < fsim[0]:
            xe = clip(centroid + rho * chi * (centroid - sim[-1]))
            fe = fn(xe)
            if fe < fr:
                replace_worst(xe, fe)
            else:
                replace_worst(xr, fr)
        elif fr < fsim[-2]:
            replace_worst(xr, fr)
        else:
            if fr < fsim[-1]:
                xc = clip(centroid + psi * rho * (centroid - sim[-1]))
                fc = fn(xc)
                shrink = fc > fr
            else:
                xc = clip(centroid - psi * (centroid - sim[-1]))
                fc = fn(xc)
                shrink = fc >= fsim[-1]
            if not shrink:
                replace_worst(xc, fc)
            else:
                for k in range(1, n + 1):
                    sim[k] = clip(sim[0] + sigma * (sim[k] - sim[0]))
                    fsim[k] = fn(sim[k])
                order = np.argsort(fsim, kind="stable")
                sim, fsim = sim[order], fsim[order]
                total = sim.sum(axis=0)

    return sim[0].copy(), float(fsim[0]), it, converged
