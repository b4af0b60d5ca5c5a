"""Eight-group CW-ODMR analysis: triplet peak finding and windowed fits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import find_peaks

from ..datacube import DataCube
from ..errors import DataError, FitError, PeakCountError
from ..models import HYPERFINE_14N_MHZ, ModelSpec, lorentzian
from .batch import FitResultCube, fit_cube
from .lm import CONVERGED, FitOptions
from .seeding import initial_guess, seed_by_dicing

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OdmrWindow:
    center: float
    low: float
    high: float
    linewidth: float
    overlapped: bool = False

    def contains(self, f):
        return (f >= self.low) & (f <= self.high)


def _robust_noise(d):
    dd = np.diff(d)
    return 1.4826 * np.median(np.abs(dd - np.median(dd))) / np.sqrt(2.0)


def _fwhm_of_deepest(d, step):
    i = int(np.argmax(d))
    half = 0.5 * d[i]
    lo = i
    while lo > 0 and d[lo - 1] > half:
        lo -= 1
    hi = i
    while hi < d.size - 1 and d[hi + 1] > half:
        hi += 1
    return (hi - lo + 1) * step


def find_odmr_peaks(freq, spectrum, expected_groups: int = 8,
                    hyperfine: float = HYPERFINE_14N_MHZ, linewidth: float | None = None):
    """Locate hyperfine-triplet groups in a mean ODMR contrast spectrum.

    The dip signal (median minus spectrum) is correlated with a unit-norm
    triplet template, local maxima closer than three hyperfine spacings are
    merged, and the strongest ``expected_groups`` peaks above eight times the
    robust noise level are kept. Centres are refined by a parabola through
    the correlation peak.

    Returns
    -------
    list of OdmrWindow
        Ordered by frequency; window half-width is ``max(3 linewidth, 3 hyperfine)``.

    Raises
    ------
    PeakCountError
        Fewer groups than expected; the exception's ``windows`` attribute
        still holds the ones that were found.
    """
    f = np.asarray(freq, dtype=np.float64)
    s = np.asarray(spectrum, dtype=np.float64)
    if f.shape != s.shape or f.size < 8:
        raise DataError("frequency axis and spectrum must match and hold >= 8 points")
    steps = np.diff(f)
    step = float(np.mean(steps))
    if np.any(steps <= 0) or np.max(np.abs(steps - step)) > 1e-6 * abs(step) + 1e-9:
        raise DataError("peak finding needs a uniform, increasing frequency axis")

    d = np.median(s) - s
    gamma = float(linewidth) if linewidth else max(_fwhm_of_deepest(d, step), 2 * step)
    half = hyperfine + 5 * gamma
    k = int(np.ceil(half / step))
    offs = np.arange(-k, k + 1) * step
    template = (lorentzian(offs, -hyperfine, gamma) + lorentzian(offs, 0.0, gamma)
                + lorentzian(offs, hyperfine, gamma))
    template /= np.sqrt(np.sum(template ** 2))
    corr = np.convolve(d, template, mode="same")

    thr = max(8.0 * _robust_noise(d), 1e-12)
    dist = max(int(np.ceil(3 * hyperfine / step)), 1)
    idx, props = find_peaks(corr, height=thr, distance=dist)
    if idx.size > expected_groups:
        keep = np.sort(np.argsort(props["peak_heights"])[::-1][:expected_groups])
        idx = idx[keep]

    w = max(3 * gamma, 3 * hyperfine)
    centers = []
    for i in idx:
        c = f[i]
        if 0 < i < corr.size - 1:
            a, b, e = corr[i - 1], corr[i], corr[i + 1]
            den = a - 2 * b + e
            if den < 0:
                c = f[i] + 0.5 * step * (a - e) / den
        centers.append(c)
    windows = []
    for j, c in enumerate(centers):
        near = [abs(c - o) < 2 * w for m, o in enumerate(centers) if m != j]
        windows.append(OdmrWindow(float(c), float(c - w), float(c + w), gamma, any(near)))

    if len(windows) < expected_groups:
        err = PeakCountError(f"found {len(windows)} ODMR groups, expected {expected_groups}",
                             len(windows))
        err.windows = windows
        raise err
    return windows


def _group_dips(freq, result: FitResultCube):
    """A * (sum of the three Lorentzians) of one group's fit, per pixel, on ``freq``."""
    a, fc, g = result.params
    ok = result.converged
    a = np.where(ok, a, 0.0)
    fc = np.where(ok, fc, 0.0)
    g = np.where(ok, g, 1.0)
    hf = result.spec.hyperfine_mhz
    f = freq[:, None, None]
    return a * (lorentzian(f, fc - hf, g) + lorentzian(f, fc, g) + lorentzian(f, fc + hf, g))


def fit_odmr_cube(cube: DataCube, windows, options: FitOptions | None = None,
                  spec: ModelSpec | None = None, dicing: int = 8,
                  backfit_passes: int = 3) -> list[FitResultCube]:
    """Fit one hyperfine triplet per window, sequentially over the groups.

    The first pass fits each window of the raw cube with seeds from an N x N
    dicing. Later passes refit every group after adding back the dips that
    the other groups' current fits predict inside its window, so tails of
    neighbouring resonances stop biasing the result. Each group's
    ``f_center`` is bounded to its window.
    """
    options = options or FitOptions()
    spec = spec or ModelSpec("odmr_triplet")
    f = cube.sweep.values
    subs = []
    for win in windows:
        sel = np.flatnonzero(win.contains(f))
        if sel.size < spec.n_params + 2:
            raise DataError(f"window [{win.low:.3f}, {win.high:.3f}] MHz holds only "
                            f"{sel.size} sweep points")
        subs.append(sel)

    def group_options(win):
        bounds = dict(options.bounds)
        bounds["f_center"] = (win.low, win.high)
        return replace(options, bounds=bounds)

    results = []
    for win, sel in zip(windows, subs):
        sub = DataCube(cube.sweep.subset(sel), cube.quantity, cube.data[sel])
        opts = group_options(win)
        try:
            seeds = seed_by_dicing(sub, spec, dicing, opts)
        except FitError:
            # keep going so the failure shows up per pixel in this group only
            logger.warning("no converged block fit in window [%.3f, %.3f] MHz", win.low, win.high)
            g0 = initial_guess(spec, sub.sweep.values, sub.mean_trace(), opts)
            seeds = np.broadcast_to(g0[:, None, None], (spec.n_params, sub.height, sub.width))
        results.append(fit_cube(sub, spec, seeds, opts))

    for npass in range(backfit_passes):
        change = 0.0
        for g, (win, sel) in enumerate(zip(windows, subs)):
            fsub = f[sel]
            others = np.zeros((sel.size, cube.height, cube.width))
            for h, res in enumerate(results):
                if h != g:
                    others += _group_dips(fsub, res)
            sub = DataCube(cube.sweep.subset(sel), cube.quantity, cube.data[sel] + others)
            prev = results[g]
            res = fit_cube(sub, spec, prev.params, group_options(win))
            both = prev.converged & res.converged
            if both.any():
                change = max(change, float(np.max(np.abs(res.params[1][both] - prev.params[1][both]))))
            results[g] = res
        logger.info("ODMR backfit pass %d: max f_center change %.3g MHz", npass + 1, change)

    for g, (win, res) in enumerate(zip(windows, results)):
        res.meta.update(group=g, window=(win.low, win.high), center_estimate=win.center)
    return results
