"""Per-pixel batch fitting over a whole cube.

Pixels are split into fixed, row-major chunks of ``options.chunk_size``.
Each chunk goes to a compiled, GIL-free loop that writes only its own
output slots, so a thread pool of any size yields the same bytes.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from ..datacube import DataCube, MapImage, SweepAxis
from ..errors import FitError, ModelMismatchError, ParameterError
from ..models import ModelSpec
from .lm import (CONVERGED, SKIPPED, STATUS_NAMES, FitOptions, FitOutcome,
                 lm_core)
from .seeding import SeedGrid, multistart_fit, seed_by_dicing

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FitResultCube:
    """Fitted parameter planes co-registered with the input cube."""

    spec: ModelSpec
    sweep: SweepAxis
    params: np.ndarray        # (n_params, height, width)
    chisq: np.ndarray         # (height, width)
    iterations: np.ndarray    # (height, width) int32
    status: np.ndarray        # (height, width) uint8, 0 = converged
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.chisq.shape[0]

    @property
    def width(self):
        return self.chisq.shape[1]

    @property
    def converged(self):
        return self.status == CONVERGED

    def outcome(self, x, y) -> FitOutcome:
        s = int(self.status[y, x])
        return FitOutcome(self.params[:, y, x].copy(), float(self.chisq[y, x]),
                          int(self.iterations[y, x]), s == CONVERGED, STATUS_NAMES[s])

    def param(self, name) -> np.ndarray:
        return self.params[self.spec.param_names.index(name)]

    def param_map(self, name) -> MapImage:
        i = self.spec.param_names.index(name)
        return MapImage(self.params[i], name, self.spec.param_units[i], ~self.converged)

    def chisq_map(self) -> MapImage:
        return MapImage(self.chisq, "chisq", "sum of squared residuals", ~self.converged)

    def status_map(self) -> MapImage:
        return MapImage(self.status.astype(np.float64), "status", "code")

    def identical(self, other: "FitResultCube") -> bool:
        """Bitwise equality of every plane."""
        return all(a.tobytes() == b.tobytes() for a, b in (
            (self.params, other.params), (self.chisq, other.chisq),
            (self.iterations, other.iterations), (self.status, other.status)))


@numba.njit(cache=True, nogil=True)
def _fit_chunk(kind, t, data, seeds, skip, fixed, lo, hi, max_iter, lam0, up, down,
               ftol, xtol, start, stop, out_p, out_chisq, out_it, out_status):
    npts = t.size
    width = data.shape[2]
    n = seeds.shape[1]
    y = np.empty(npts)
    p0 = np.empty(n)
    p = np.empty(n)
    trace = np.empty(0)
    for i in range(start, stop):
        if skip[i]:
            out_status[i] = SKIPPED
            out_chisq[i] = np.nan
            for j in range(n):
                out_p[i, j] = np.nan
            out_it[i] = 0
            continue
        r = i // width
        c = i - r * width
        for k in range(npts):
            y[k] = data[k, r, c]
        for j in range(n):
            p0[j] = seeds[i, j]
        chisq, it, status, _ = lm_core(kind, t, y, p0, fixed, lo, hi, max_iter, lam0,
                                       up, down, ftol, xtol, p, trace)
        for j in range(n):
            out_p[i, j] = p[j]
        out_chisq[i] = chisq
        out_it[i] = it
        out_status[i] = status


def _check_cube(cube: DataCube, spec: ModelSpec):
    if spec.quantity is not None and cube.quantity != spec.quantity:
        raise ModelMismatchError(
            f"model {spec.kind} fits {spec.quantity} data, cube holds {cube.quantity}")
    spec.check_sweep(cube.sweep)
    if cube.points < spec.n_params + 1:
        raise ModelMismatchError(f"{cube.points} sweep points cannot constrain "
                                 f"{spec.n_params} parameters")


def fit_cube(cube: DataCube, spec: ModelSpec, seeds, options: FitOptions | None = None,
             skip=None) -> FitResultCube:
    """Fit every pixel of ``cube`` independently.

    Parameters
    ----------
    seeds : SeedGrid or ndarray
        Block seeds from :func:`seed_by_dicing`, or explicit per-pixel
        starting values of shape ``(n_params, height, width)``.
    skip : ndarray of bool, optional
        ``(height, width)`` pixels to leave unfitted (status ``skipped``).
    """
    options = options or FitOptions()
    _check_cube(cube, spec)
    h, w, n = cube.height, cube.width, spec.n_params
    lo, hi = options.bounds_for(spec)
    if isinstance(seeds, SeedGrid):
        if (seeds.height, seeds.width) != (h, w) or seeds.params.shape[-1] != n:
            raise ParameterError("seed grid does not match cube/model")
        per_pixel = seeds.pixel_seeds().reshape(h * w, n)
    else:
        arr = np.asarray(seeds, dtype=np.float64)
        if arr.shape != (n, h, w):
            raise ParameterError(f"per-pixel seeds must have shape {(n, h, w)}")
        per_pixel = arr.reshape(n, h * w).T
    per_pixel = np.ascontiguousarray(np.clip(per_pixel, lo, hi))
    if not np.all(np.isfinite(per_pixel)):
        raise ParameterError("seeds contain non-finite values")
    skip_flat = np.zeros(h * w, bool) if skip is None else \
        np.ascontiguousarray(np.asarray(skip, bool).reshape(h * w))

    t = np.ascontiguousarray(cube.sweep.values)
    fixed = spec.fixed_vector()
    out_p = np.empty((h * w, n))
    out_chisq = np.empty(h * w)
    out_it = np.empty(h * w, np.int32)
    out_status = np.empty(h * w, np.uint8)
    total = h * w
    chunks = [(s, min(s + options.chunk_size, total)) for s in range(0, total, options.chunk_size)]

    def run(bounds):
        _fit_chunk(spec.code, t, cube.data, per_pixel, skip_flat, fixed, lo, hi,
                   options.max_iterations, options.damping_init, options.damping_up,
                   options.damping_down, options.ftol, options.xtol, bounds[0], bounds[1],
                   out_p, out_chisq, out_it, out_status)

    if options.workers == 1 or len(chunks) == 1:
        for c in chunks:
            run(c)
    else:
        with ThreadPoolExecutor(max_workers=options.workers) as pool:
            list(pool.map(run, chunks))

    params = np.ascontiguousarray(out_p.T.reshape(n, h, w))
    return FitResultCube(spec, cube.sweep, params, out_chisq.reshape(h, w),
                         out_it.reshape(h, w), out_status.reshape(h, w))


def fit_t1_two_stage(cube: DataCube, options: FitOptions | None = None, dicing: int = 8,
                     spec: ModelSpec | None = None) -> FitResultCube:
    """T1 fit with the stretch exponent freed on the global mean, then frozen per pixel."""
    options = options or FitOptions()
    base = spec or ModelSpec("t1")
    free = replace(base, free_stretch=True)
    _check_cube(cube, free)
    rng = np.random.Generator(np.random.Philox(key=[options.seed, 0xE75]))
    best = multistart_fit((cube.sweep, cube.mean_trace()), free, options, rng)
    if best is None:
        raise FitError("stage 1 (free stretch exponent on the mean trace) did not converge")
    eps = float(best.params[2])
    fixed = replace(base, free_stretch=False, stretch_exponent=eps)
    logger.info("T1 stage 1: epsilon = %.5f (chisq %.3g)", eps, best.chisq)
    seeds = seed_by_dicing(cube, fixed, dicing, options)
    res = fit_cube(cube, fixed, seeds, options)
    res.meta.update(stage1_params=best.params.tolist(), stage1_chisq=best.chisq,
                    stretch_exponent=eps)
    return res
