"""Starting values: per-model heuristics, multi-start block fits, N x N dicing."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..datacube import DataCube
from ..errors import FitError, ParameterError
from ..models import ModelSpec, eval_odmr
from .lm import FitOptions, FitOutcome, lm_fit

logger = logging.getLogger(__name__)


def _span(t):
    return max(float(t[-1] - t[0]), 1e-12)


def _loglinear(x, z):
    """Least-squares line through (x, log z) over the positive part of z."""
    ok = z > 0.05 * np.max(z) if np.max(z) > 0 else np.zeros(z.shape, bool)
    if ok.sum() < 2:
        return None
    slope, intercept = np.polyfit(x[ok], np.log(z[ok]), 1)
    return slope, intercept


def _guess_hahn(t, y):
    fit = _loglinear(t, y)
    if fit is None:
        return np.array([max(np.max(y), 1e-6), 1.0 / _span(t)])
    slope, intercept = fit
    return np.array([np.exp(intercept), max(-slope, 0.1 / _span(t))])


def _guess_t1(t, y, eps):
    z = 1.0 - y
    fit = _loglinear(t ** eps, z)
    if fit is None:
        return np.array([max(np.max(z), 1e-6), 1.0 / _span(t)])
    slope, intercept = fit
    rate = max(-slope, 1e-12) ** (1.0 / eps)
    return np.array([min(np.exp(intercept), 1.0), max(rate, 0.1 / _span(t))])


def dominant_frequency(t, z, fmax=None):
    """Peak of the discrete power spectrum of ``z - mean(z)`` on a fine grid.

    Works for non-uniform sampling; the grid is 8x oversampled relative to
    the record length and the peak is refined by a parabola through the
    three highest samples.
    """
    zc = z - z.mean()
    span = _span(t)
    if fmax is None:
        fmax = 0.5 / np.median(np.diff(t))
    df = 1.0 / (8.0 * span)
    freqs = np.arange(df, fmax + df, df)
    ph = 2j * np.pi * np.outer(freqs, t)
    power = np.abs(np.exp(-ph) @ zc) ** 2
    k = int(np.argmax(power))
    if 0 < k < freqs.size - 1:
        a, b, c = power[k - 1], power[k], power[k + 1]
        den = a - 2 * b + c
        if den < 0:
            return freqs[k] + 0.5 * df * (a - c) / den
    return freqs[k]


def _guess_rabi(t, y):
    f = dominant_frequency(t, 1.0 - y)
    best = None
    span = _span(t)
    for kappa in np.concatenate(([0.0], np.logspace(-2, 1.5, 24) / span)):
        basis = -0.5 * (1.0 - np.cos(2 * np.pi * f * t) * np.exp(-t * kappa))
        den = basis @ basis
        if den <= 0:
            continue
        amp = basis @ (y - 1.0) / den
        res = np.sum((y - 1.0 - amp * basis) ** 2)
        if best is None or res < best[0]:
            best = (res, amp, kappa)
    _, amp, kappa = best
    return np.array([min(max(amp, 1e-6), 2.0), f, kappa])


def _ramsey_basis(t, kappa, spec):
    w = 2 * np.pi * t
    det, hf = spec.detuning_mhz, spec.hyperfine_mhz
    e = np.exp(-t * kappa)
    return np.stack([(1 - np.sin(w * (det - hf))) * e,
                     (1 - np.sin(w * det)) * e,
                     (1 - np.sin(w * (det + hf))) * e], axis=1)


def _guess_ramsey(t, y, spec):
    inner = (y[1:-1] >= y[:-2]) & (y[1:-1] >= y[2:])
    idx = np.concatenate(([0], np.flatnonzero(inner) + 1))
    kappa = 1.0 / _span(t)
    if idx.size >= 2 and np.all(y[idx] > 0):
        slope, _ = np.polyfit(t[idx], np.log(y[idx]), 1)
        kappa = max(-slope, 0.1 / _span(t))
    basis = _ramsey_basis(t, kappa, spec)
    amps, *_ = np.linalg.lstsq(basis, y, rcond=None)
    amps = np.clip(amps, 0.0, None)
    if not np.any(amps > 0):
        amps[:] = max(np.mean(y), 1e-6) / 3.0
    return np.concatenate((amps, [kappa]))


def _guess_odmr(t, y, spec, f_lo=-np.inf, f_hi=np.inf):
    inside = (t >= f_lo) & (t <= f_hi)
    centers = t[inside] if inside.any() else t
    step = float(np.median(np.diff(t)))
    widths = np.geomspace(2 * step, max(_span(t) / 4, 4 * step), 10)
    z = 1.0 - y
    best = None
    for gamma in widths:
        for fc in centers:
            basis = 1.0 - eval_odmr(t, 1.0, fc, gamma, spec.hyperfine_mhz)
            den = basis @ basis
            amp = basis @ z / den
            res = np.sum((z - amp * basis) ** 2)
            if best is None or res < best[0]:
                best = (res, amp, fc, gamma)
    _, amp, fc, gamma = best
    return np.array([min(max(amp, 1e-6), 1.0), fc, gamma])


def _guess_gaussian(x, y):
    w = np.clip(y, 0, None)
    if w.sum() <= 0:
        return np.array([1.0, float(np.mean(x)), _span(x) / 4])
    mean = float(np.sum(w * x) / w.sum())
    sd = float(np.sqrt(np.sum(w * (x - mean) ** 2) / w.sum()))
    step = float(np.median(np.diff(x))) if x.size > 1 else 1.0
    return np.array([float(np.max(y)), mean, max(sd, step / 2)])


def initial_guess(spec: ModelSpec, t, y, options: FitOptions | None = None):
    """Heuristic starting point for one (usually averaged) trace, clipped to bounds."""
    options = options or FitOptions()
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lo, hi = options.bounds_for(spec)
    k = spec.kind
    if k == "hahn":
        p = _guess_hahn(t, y)
    elif k == "t1":
        p = _guess_t1(t, y, 1.0 if spec.free_stretch else spec.stretch_exponent)
        if spec.free_stretch:
            p = np.append(p, 1.0)
    elif k == "rabi":
        p = _guess_rabi(t, y)
    elif k == "ramsey":
        p = _guess_ramsey(t, y, spec)
    elif k == "odmr_triplet":
        p = _guess_odmr(t, y, spec, lo[1], hi[1])
    else:
        p = _guess_gaussian(t, y)
    return np.clip(p, lo, hi)


def multistart_fit(series, spec: ModelSpec, options: FitOptions, rng: np.random.Generator,
                   start=None) -> FitOutcome | None:
    """Heuristic start plus ``options.restarts`` jittered starts; best converged wins."""
    sweep, y = series
    t = sweep.values if hasattr(sweep, "values") else np.asarray(sweep)
    lo, hi = options.bounds_for(spec)
    base = initial_guess(spec, t, y, options) if start is None else np.clip(start, lo, hi)
    starts = [base]
    for _ in range(options.restarts):
        starts.append(np.clip(base * (1 + rng.uniform(-options.jitter, options.jitter, base.size)),
                              lo, hi))
    best = None
    for s in starts:
        out = lm_fit(series, spec, s, options)
        if out.converged and (best is None or out.chisq < best.chisq):
            best = out
    return best


def block_edges(size: int, n: int) -> np.ndarray:
    """Block boundaries along one axis: block ``k`` covers ``[e[k], e[k+1])``."""
    return (np.arange(n + 1) * size) // n


@dataclass(frozen=True, eq=False)
class SeedGrid:
    """Per-block starting parameters for an N x N dicing of the image.

    Pixel ``(x, y)`` belongs to block ``(y * n // height, x * n // width)``
    rounded down on :func:`block_edges`. ``inherited`` marks blocks whose own
    fits all failed and that took a neighbour's result instead.
    """

    n: int
    height: int
    width: int
    params: np.ndarray        # (n, n, n_params)
    chisq: np.ndarray         # (n, n)
    inherited: np.ndarray     # (n, n) bool

    @property
    def row_edges(self):
        return block_edges(self.height, self.n)

    @property
    def col_edges(self):
        return block_edges(self.width, self.n)

    def block_of(self, x, y):
        by = np.searchsorted(self.row_edges, y, side="right") - 1
        bx = np.searchsorted(self.col_edges, x, side="right") - 1
        return by, bx

    def pixel_seeds(self) -> np.ndarray:
        """Seed for every pixel, shape ``(height, width, n_params)``."""
        ys, xs = np.arange(self.height), np.arange(self.width)
        by = np.searchsorted(self.row_edges, ys, side="right") - 1
        bx = np.searchsorted(self.col_edges, xs, side="right") - 1
        return self.params[by[:, None], bx[None, :]]


def seed_by_dicing(cube: DataCube, spec: ModelSpec, n: int,
                   options: FitOptions | None = None) -> SeedGrid:
    """Fit the block-averaged trace of every cell of an N x N grid.

    Each block runs :func:`multistart_fit` on the mean of its member pixels.
    A block with no converged start inherits the nearest converged block's
    parameters (flagged in ``inherited``).
    """
    options = options or FitOptions()
    if not 1 <= n <= 10:
        raise ParameterError("dicing factor must satisfy 1 <= N <= 10")
    spec.check_sweep(cube.sweep)
    re, ce = block_edges(cube.height, n), block_edges(cube.width, n)
    params = np.full((n, n, spec.n_params), np.nan)
    chisq = np.full((n, n), np.nan)
    ok = np.zeros((n, n), bool)
    for by in range(n):
        for bx in range(n):
            block = cube.data[:, re[by]:re[by + 1], ce[bx]:ce[bx + 1]]
            if block.size == 0:
                continue
            trace = block.reshape(cube.points, -1).mean(axis=1)
            rng = np.random.Generator(np.random.Philox(key=[options.seed, by * n + bx]))
            best = multistart_fit((cube.sweep, trace), spec, options, rng)
            if best is not None:
                params[by, bx] = best.params
                chisq[by, bx] = best.chisq
                ok[by, bx] = True
    if not ok.any():
        raise FitError(f"no block of the {n}x{n} dicing produced a converged {spec.kind} fit")
    inherited = ~ok
    if inherited.any():
        good = np.argwhere(ok)
        for by, bx in np.argwhere(inherited):
            d2 = (good[:, 0] - by) ** 2 + (good[:, 1] - bx) ** 2
            gy, gx = good[int(np.argmin(d2))]
            params[by, bx] = params[gy, gx]
        logger.warning("%d of %d blocks inherited a neighbour seed", int(inherited.sum()), n * n)
    return SeedGrid(n, cube.height, cube.width, params, chisq, inherited)
