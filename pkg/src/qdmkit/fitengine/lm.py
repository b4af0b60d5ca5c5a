"""Bounded Levenberg-Marquardt for small per-pixel problems.

Classic Marquardt scheme: solve ``(JtJ + lam * diag(JtJ)) dp = Jt r`` by
Cholesky, project the trial point onto the box bounds, accept it only if the
sum of squared residuals drops (lam /= down), otherwise lam *= up and retry.

The same compiled routine serves single fits and the batch driver, and it
only uses scalar arithmetic in a fixed order, so a pixel's outcome does not
depend on which thread fitted it or how the image was chunked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from ..datacube import SweepAxis
from ..errors import DataError, ParameterError
from ..models import ModelSpec, model_point

CONVERGED, MAX_ITER, SINGULAR, BOUNDS_STUCK, SKIPPED = 0, 1, 2, 3, 4
STATUS_NAMES = {CONVERGED: None, MAX_ITER: "max_iter", SINGULAR: "singular_normal_matrix",
                BOUNDS_STUCK: "bounds_stuck", SKIPPED: "skipped"}

_LAM_MAX = 1e20
_LAM_MIN = 1e-20
_MAXP = 8


@dataclass
class FitOptions:
    """Solver and batch knobs.

    ``bounds`` maps parameter names to ``(low, high)`` and overrides the
    model defaults. ``workers`` only changes speed, never results.
    """

    max_iterations: int = 200
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    ftol: float = 1e-9
    xtol: float = 1e-8
    bounds: dict = field(default_factory=dict)
    workers: int = 1
    chunk_size: int = 4096
    restarts: int = 5
    jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        if self.damping_up <= 1 or self.damping_down <= 1 or self.damping_init <= 0:
            raise ParameterError("damping factors must exceed 1 and lam0 must be > 0")
        for name, (lo, hi) in self.bounds.items():
            if np.isnan(lo) or np.isnan(hi) or lo > hi:
                raise ParameterError(f"bad bounds for {name}: {(lo, hi)}")

    def bounds_for(self, spec: ModelSpec):
        lo, hi = spec.default_bounds()
        for i, name in enumerate(spec.param_names):
            if name in self.bounds:
                lo[i], hi[i] = self.bounds[name]
        return lo, hi


@dataclass
class FitOutcome:
    params: np.ndarray
    chisq: float
    iterations: int
    converged: bool
    failure_reason: str | None = None
    trace: np.ndarray | None = None


@numba.njit(cache=True, nogil=True)
def _sumsq(kind, t, y, p, fixed, grad):
    s = 0.0
    for i in range(t.size):
        r = y[i] - model_point(kind, t[i], p, fixed, grad)
        s += r * r
    return s


@numba.njit(cache=True, nogil=True)
def _normal_equations(kind, t, y, p, fixed, grad, a, g):
    n = p.size
    for j in range(n):
        g[j] = 0.0
        for k in range(n):
            a[j, k] = 0.0
    s = 0.0
    for i in range(t.size):
        r = y[i] - model_point(kind, t[i], p, fixed, grad)
        s += r * r
        for j in range(n):
            g[j] += grad[j] * r
            for k in range(j + 1):
                a[j, k] += grad[j] * grad[k]
    for j in range(n):
        for k in range(j):
            a[k, j] = a[j, k]
    return s


@numba.njit(cache=True, nogil=True)
def _damped_solve(a, g, lam, dscale, m, step):
    """Cholesky solve of (A + lam*D) step = g; False if not positive definite."""
    n = g.size
    for j in range(n):
        for k in range(n):
            m[j, k] = a[j, k]
        m[j, j] += lam * dscale[j]
    for j in range(n):
        s = m[j, j]
        for k in range(j):
            s -= m[j, k] * m[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        m[j, j] = d
        for i in range(j + 1, n):
            s2 = m[i, j]
            for k in range(j):
                s2 -= m[i, k] * m[j, k]
            m[i, j] = s2 / d
    for i in range(n):
        s = g[i]
        for k in range(i):
            s -= m[i, k] * step[k]
        step[i] = s / m[i, i]
    for i in range(n - 1, -1, -1):
        s = step[i]
        for k in range(i + 1, n):
            s -= m[k, i] * step[k]
        step[i] = s / m[i, i]
    for i in range(n):
        if not np.isfinite(step[i]):
            return False
    return True


@numba.njit(cache=True, nogil=True)
def lm_core(kind, t, y, p0, fixed, lo, hi, max_iter, lam0, up, down, ftol, xtol,
            p, trace):
    """Fit in place into ``p``; returns ``(chisq, iterations, status, n_trace)``.

    ``trace`` receives the chisq after every accepted step (index 0 holds the
    starting value) while it has room.
    """
    n = p0.size
    grad = np.empty(n)
    a = np.empty((n, n))
    g = np.empty(n)
    m = np.empty((n, n))
    step = np.empty(n)
    trial = np.empty(n)
    dscale = np.empty(n)
    for j in range(n):
        p[j] = min(max(p0[j], lo[j]), hi[j])

    chisq = _normal_equations(kind, t, y, p, fixed, grad, a, g)
    ntr = 0
    if trace.size > 0:
        trace[0] = chisq
        ntr = 1
    if not np.isfinite(chisq):
        return chisq, 0, SINGULAR, ntr
    lam = lam0
    it = 0
    status = CONVERGED if chisq == 0.0 else MAX_ITER
    while it < max_iter and status != CONVERGED:
        it += 1
        dmax = 0.0
        for j in range(n):
            if a[j, j] > dmax:
                dmax = a[j, j]
        if not (dmax > 0.0 and np.isfinite(dmax)):
            status = SINGULAR
            break
        for j in range(n):
            dscale[j] = max(a[j, j], 1e-12 * dmax)
        pnorm = 0.0
        for j in range(n):
            pnorm += p[j] * p[j]
        pnorm = np.sqrt(pnorm)

        accepted = False
        done = False
        while True:
            if not _damped_solve(a, g, lam, dscale, m, step):
                lam *= up
                if lam > _LAM_MAX:
                    status = SINGULAR
                    done = True
                    break
                continue
            raw = 0.0
            moved = 0.0
            for j in range(n):
                trial[j] = min(max(p[j] + step[j], lo[j]), hi[j])
                raw += step[j] * step[j]
                moved += (trial[j] - p[j]) * (trial[j] - p[j])
            raw = np.sqrt(raw)
            moved = np.sqrt(moved)
            small = xtol * (pnorm + xtol)
            if moved == 0.0:
                status = CONVERGED if raw <= small else BOUNDS_STUCK
                done = True
                break
            new = _sumsq(kind, t, y, trial, fixed, grad)
            if np.isfinite(new) and new < chisq:
                rel = (chisq - new) / chisq
                for j in range(n):
                    p[j] = trial[j]
                chisq = _normal_equations(kind, t, y, p, fixed, grad, a, g)
                if ntr < trace.size:
                    trace[ntr] = chisq
                    ntr += 1
                lam = max(lam / down, _LAM_MIN)
                accepted = True
                if chisq == 0.0 or rel < ftol or moved <= small:
                    status = CONVERGED
                    done = True
                break
            if moved <= small:
                status = CONVERGED
                done = True
                break
            lam *= up
            if lam > _LAM_MAX:
                status = SINGULAR
                done = True
                break
        if done:
            break
        if not accepted:
            break

    if status == CONVERGED:
        # an optimum sitting on a bound with the gradient pointing outward is
        # a constrained artefact, not a fit of the model to the data
        for j in range(n):
            tol = 1e-6 * np.sqrt(a[j, j] * chisq)
            if (p[j] <= lo[j] and g[j] < -tol) or (p[j] >= hi[j] and g[j] > tol):
                status = BOUNDS_STUCK
                break
    if status == CONVERGED:
        # a parameter the model no longer depends on (e.g. a line centre once
        # the amplitude is zero) is not determined by the data
        dmax = 0.0
        for j in range(n):
            dmax = max(dmax, a[j, j])
        for j in range(n):
            if not a[j, j] > 1e-24 * dmax:
                status = SINGULAR
                break
    return chisq, it, status, ntr


def _series_arrays(series):
    if isinstance(series, tuple):
        sweep, values = series
    else:
        raise TypeError("series must be a (sweep, values) pair")
    t = np.ascontiguousarray(sweep.values if isinstance(sweep, SweepAxis) else sweep,
                             dtype=np.float64)
    y = np.ascontiguousarray(values, dtype=np.float64)
    return sweep, t, y


def lm_fit(series, spec: ModelSpec, seed, options: FitOptions | None = None,
           return_trace: bool = False) -> FitOutcome:
    """Fit one trace.

    Parameters
    ----------
    series : tuple
        ``(sweep, values)`` as returned by :func:`qdmkit.datacube.pixel_series`.
        ``sweep`` may be a :class:`SweepAxis` (its kind is checked) or an array.
    spec : ModelSpec
    seed : array_like
        Starting parameters; must lie within the bounds.
    options : FitOptions, optional
    return_trace : bool
        Attach the chisq after each accepted step as ``outcome.trace``.
    """
    options = options or FitOptions()
    sweep, t, y = _series_arrays(series)
    spec.check_sweep(sweep)
    if t.shape != y.shape:
        raise DataError("sweep and values differ in length")
    if np.any(np.isnan(y)) or np.any(~np.isfinite(t)):
        raise DataError("series contains NaN")
    if y.size < spec.n_params + 1:
        raise DataError(f"need at least {spec.n_params + 1} points for {spec.kind}")
    p0 = np.asarray(seed, dtype=np.float64)
    if p0.shape != (spec.n_params,):
        raise ParameterError(f"seed must have {spec.n_params} entries")
    lo, hi = options.bounds_for(spec)
    if np.any(p0 < lo) or np.any(p0 > hi):
        raise ParameterError(f"seed {p0} outside bounds")
    p = np.empty_like(p0)
    trace = np.empty(options.max_iterations + 1 if return_trace else 0)
    chisq, it, status, ntr = lm_core(
        spec.code, t, y, p0, spec.fixed_vector(), lo, hi, options.max_iterations,
        options.damping_init, options.damping_up, options.damping_down,
        options.ftol, options.xtol, p, trace)
    return FitOutcome(p, float(chisq), int(it), status == CONVERGED, STATUS_NAMES[status],
                      trace[:ntr].copy() if return_trace else None)
