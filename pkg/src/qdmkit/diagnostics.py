"""Fit-quality maps and population statistics of result maps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .datacube import DataCube, MapImage
from .errors import DataError
from .fitengine.batch import FitResultCube
from .fitengine.lm import FitOptions, lm_fit
from .fitengine.seeding import initial_guess
from .models import ModelSpec, evaluate


def chisq_map(results: FitResultCube) -> MapImage:
    """Per-pixel sum of squared residuals; non-converged pixels are masked."""
    return results.chisq_map()


def recompute_chisq(cube: DataCube, results: FitResultCube) -> np.ndarray:
    """Residual sums rebuilt from the cube and fitted parameters via the numpy models."""
    spec = results.spec
    out = np.full((results.height, results.width), np.nan)
    for y, x in np.argwhere(results.converged):
        model = evaluate(spec, results.params[:, y, x], results.sweep)
        out[y, x] = np.sum((cube.data[:, y, x] - model) ** 2)
    return out


def _lerp(a, b, t):
    return a + (b - a) * t


def percentile_report(image, percentiles=(10, 90)) -> dict:
    """Type-7 (linear interpolation) order statistics of the valid pixels.

    ``percentiles`` are in percent. Returns ``{p: value}``.
    """
    v = image.valid_values() if isinstance(image, MapImage) else np.asarray(image, float).ravel()
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise DataError("percentiles need at least two valid pixels")
    n = v.size
    out = {}
    for p in percentiles:
        if not 0 <= p <= 100:
            raise DataError(f"percentile {p} outside [0, 100]")
        h = (n - 1) * p / 100.0
        lo = int(np.floor(h))
        hi = min(lo + 1, n - 1)
        part = np.partition(v, (lo, hi))
        out[p] = float(_lerp(part[lo], part[hi], h - lo))
    return out


@dataclass
class HistogramStats:
    edges: np.ndarray
    counts: np.ndarray
    median: float
    mean: float
    std: float
    gaussian: tuple | None           # (amplitude, mean, sigma) or None
    gaussian_ok: bool
    fraction_within: dict            # p -> fraction with |v - median| <= p * |median|

    @property
    def relative_width(self):
        """Gaussian sigma over Gaussian mean (nan without a fit)."""
        if not self.gaussian_ok:
            return float("nan")
        return self.gaussian[2] / abs(self.gaussian[1])


def _fd_bins(v):
    q75, q25 = np.percentile(v, [75, 25])
    width = 2 * (q75 - q25) / np.cbrt(v.size)
    span = v.max() - v.min()
    if width <= 0 or span <= 0:
        return 1
    return int(min(max(np.ceil(span / width), 1), 10_000))


def histogram_stats(image, bins="fd", p_list=(0.05, 0.10), options: FitOptions | None = None
                    ) -> HistogramStats:
    """Histogram, Gaussian fit to it, median and fraction-within-p-of-median.

    ``bins`` is an integer count or ``"fd"`` for the Freedman-Diaconis rule.
    The Gaussian is fitted to the bin counts with the LM engine and is only
    attempted with at least 100 valid pixels and a non-constant map.
    """
    v = image.valid_values() if isinstance(image, MapImage) else np.asarray(image, float).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise DataError("map has no valid pixels")
    nbins = _fd_bins(v) if bins == "fd" else int(bins)
    if v.max() > v.min():
        counts, edges = np.histogram(v, bins=nbins)
    else:
        counts, edges = np.array([v.size]), np.array([v[0] - 0.5, v[0] + 0.5])
    median = float(np.median(v))
    within = {p: float(np.mean(np.abs(v - median) <= p * abs(median))) for p in p_list}

    gauss, ok = None, False
    if v.size >= 100 and counts.size >= 4:
        centers = 0.5 * (edges[1:] + edges[:-1])
        spec = ModelSpec("gaussian")
        opts = options or FitOptions()
        seed = initial_guess(spec, centers, counts.astype(float), opts)
        out = lm_fit((centers, counts.astype(float)), spec, seed, opts)
        if out.converged and out.params[2] > 0:
            gauss, ok = tuple(float(x) for x in out.params), True
    return HistogramStats(edges, counts, median, float(np.mean(v)), float(np.std(v)),
                          gauss, ok, within)


def stats_csv(stats: HistogramStats, percentiles: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["statistic", "value"])
    w.writerow(["mean", repr(stats.mean)])
    w.writerow(["median", repr(stats.median)])
    w.writerow(["std", repr(stats.std)])
    w.writerow(["gaussian_ok", int(stats.gaussian_ok)])
    if stats.gaussian_ok:
        for name, val in zip(("gaussian_amplitude", "gaussian_mean", "gaussian_sigma"), stats.gaussian):
            w.writerow([name, repr(val)])
        w.writerow(["gaussian_relative_width", repr(stats.relative_width)])
    for p, frac in stats.fraction_within.items():
        w.writerow([f"fraction_within_{p:g}_of_median", repr(frac)])
    for p, val in percentiles.items():
        w.writerow([f"p{p:g}", repr(val)])
        w.writerow([f"p{p:g}_rel_to_mean", repr(val / stats.mean - 1 if stats.mean else float("nan"))])
    return buf.getvalue()


def histogram_csv(stats: HistogramStats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "count"])
    for lo, hi, c in zip(stats.edges[:-1], stats.edges[1:], stats.counts):
        w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return buf.getvalue()


def to_pgm(image: MapImage) -> bytes:
    """8-bit binary PGM, min-max scaled over valid pixels; masked pixels are 0."""
    v = image.valid_values()
    lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
    scale = 254.0 / (hi - lo) if hi > lo else 0.0
    pix = np.where(image.mask, 0, 1 + np.round((np.nan_to_num(image.data) - lo) * scale))
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    return header + pix.astype(np.uint8).tobytes()
