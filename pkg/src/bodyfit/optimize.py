"""Limited-memory BFGS with a strong-Wolfe line search, plus a gradient checker.

Every energy in the package (posture, shape, reconstruction) is minimized
through :func:`minimize`.  Objectives return ``(value, gradient)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class OptimizationError(RuntimeError):
    """Raised when an objective cannot be evaluated at the starting point."""


@dataclass
class MinimizeOptions:
    max_iterations: int = 1000
    gtol: float | None = None  # None -> 1e-6 * max(1, |f(x0)|)
    ftol: float = 1e-9
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 30

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory depth must be >= 1")
        if self.ftol <= 0 or (self.gtol is not None and self.gtol <= 0):
            raise ValueError("tolerances must be positive")


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    status: str
    iterations: int
    evaluations: int
    history: list

    @property
    def converged(self) -> bool:
        return self.status.startswith("converged")


def _cubic_min(a, fa, ga, b, fb, gb):
    # minimizer of the cubic interpolating (a, fa, ga) and (b, fb, gb)
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def _line_search(phi, f0, g0, step, opts):
    """Strong-Wolfe search (bracketing + zoom).  ``phi(a)`` returns (f, dphi, payload)."""
    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = step
    best = None
    for i in range(opts.max_linesearch):
        fa, ga, payload = phi(a)
        if not np.isfinite(fa):
            a = 0.5 * (a_prev + a)
            continue
        if best is None or fa < best[1]:
            best = (a, fa, payload)
        if fa > f0 + opts.c1 * a * g0 or (i > 0 and fa >= f_prev):
            return _zoom(phi, f0, g0, a_prev, f_prev, g_prev, a, fa, ga, opts, best)
        if abs(ga) <= -opts.c2 * g0:
            return a, fa, payload, True
        if ga >= 0:
            return _zoom(phi, f0, g0, a, fa, ga, a_prev, f_prev, g_prev, opts, best)
        a_prev, f_prev, g_prev = a, fa, ga
        a = 2.0 * a
    return best[0] if best else 0.0, best[1] if best else f0, best[2] if best else None, False


def _zoom(phi, f0, g0, lo, flo, glo, hi, fhi, ghi, opts, best):
    for _ in range(opts.max_linesearch):
        a = _cubic_min(lo, flo, glo, hi, fhi, ghi)
        left, right = min(lo, hi), max(lo, hi)
        width = right - left
        if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
            a = 0.5 * (lo + hi)
        fa, ga, payload = phi(a)
        if np.isfinite(fa) and (best is None or fa < best[1]):
            best = (a, fa, payload)
        if not np.isfinite(fa) or fa > f0 + opts.c1 * a * g0 or fa >= flo:
            hi, fhi, ghi = a, fa, ga
        else:
            if abs(ga) <= -opts.c2 * g0:
                return a, fa, payload, True
            if ga * (hi - lo) >= 0:
                hi, fhi, ghi = lo, flo, glo
            lo, flo, glo = a, fa, ga
        if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
            break
    if best is not None and best[1] < f0:
        return best[0], best[1], best[2], False
    return 0.0, f0, None, False


def minimize(objective: Objective, x0, options: MinimizeOptions | None = None) -> MinimizeResult:
    """Minimize ``objective`` from ``x0`` with L-BFGS.

    Returns a :class:`MinimizeResult` whose ``status`` is one of
    ``converged-gradient``, ``converged-function``, ``max-iter`` or
    ``line-search-failed`` (best point so far is returned in that case).
    """
    opts = options or MinimizeOptions()
    x = np.array(x0, dtype=float).ravel()
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=float).ravel()
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("objective is not finite at the starting point")
    gtol = opts.gtol if opts.gtol is not None else 1e-6 * max(1.0, abs(f))
    history = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    evals = 1

    if np.max(np.abs(g)) <= gtol:
        return MinimizeResult(x, f, "converged-gradient", 0, evals, history)

    status = "max-iter"
    it = 0
    for it in range(1, opts.max_iterations + 1):
        # two-loop recursion
        q = -g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / y.dot(s)
            a = rho * s.dot(q)
            alphas.append((rho, a))
            q -= a * y
        if s_hist:
            q *= s_hist[-1].dot(y_hist[-1]) / y_hist[-1].dot(y_hist[-1])
        for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
            b = rho * y.dot(q)
            q += (a - b) * s
        d = q
        dg = d.dot(g)
        if dg >= 0:
            # lost descent; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g
            dg = -g.dot(g)

        step = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))

        def phi(a, x=x, d=d):
            counter[0] += 1
            xa = x + a * d
            fa, ga = objective(xa)
            ga = np.asarray(ga, dtype=float).ravel()
            return float(fa), float(ga.dot(d)), (xa, ga)

        counter = [0]
        a, f_new, payload, ok = _line_search(phi, f, dg, step, opts)
        evals += counter[0]
        if payload is None or not f_new <= f:
            status = "line-search-failed"
            break
        x_new, g_new = payload
        s = x_new - x
        y = g_new - g
        if y.dot(s) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        f_prev = f
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if np.max(np.abs(g)) <= gtol:
            status = "converged-gradient"
            break
        if f_prev - f <= opts.ftol * max(abs(f_prev), abs(f)):
            status = "converged-function"
            break
        if not ok and f_prev - f <= 0:
            status = "line-search-failed"
            break
    logger.debug("minimize: %s after %d iterations, f=%g", status, it, f)
    return MinimizeResult(x, f, status, it, evals, history)


def check_gradient(objective: Objective, x, step: float = 1e-6, samples: int = 50, rng=None):
    """Max relative error between the analytic gradient and central differences.

    Coordinates are drawn at random (without replacement when possible).
    Relative error is ``|analytic - numeric| / max(1e-12, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(rng)
    x = np.array(x, dtype=float).ravel()
    _, g = objective(x)
    g = np.asarray(g, dtype=float).ravel()
    n = x.size
    idx = rng.choice(n, size=min(samples, n), replace=False)
    worst = 0.0
    for i in idx:
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        numeric = (objective(xp)[0] - objective(xm)[0]) / (2.0 * step)
        err = abs(g[i] - numeric) / max(1e-12, abs(numeric))
        worst = max(worst, err)
    return worst
