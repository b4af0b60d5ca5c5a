"""Closed-form spin-measurement models and their analytic Jacobians.

Two independent code paths exist on purpose:

* ``eval_hahn`` ... ``eval_odmr`` are plain vectorised numpy and are what
  the synthetic generator and all oracles use;
* ``model_point`` is the compiled per-point kernel (value and partials)
  driven by the Levenberg-Marquardt engine.

Tests cross-check one against the other.

Lorentzians use unit peak height, ``L = (G/2)^2 / ((f - f0)^2 + (G/2)^2)``,
so the ODMR amplitude reads directly as the fractional dip of each line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .datacube import SweepAxis
from .errors import ModelMismatchError, ParameterError

HYPERFINE_14N_MHZ = 2.158
RAMSEY_DETUNING_MHZ = 5.0

# kernel selectors
ODMR, RABI, RAMSEY, HAHN, T1, T1_FREE, GAUSSIAN = range(7)

_LAYOUT = {
    "odmr_triplet": (("A", ""), ("f_center", "MHz"), ("gamma", "MHz")),
    "rabi": (("A", ""), ("f", "MHz"), ("kappa", "1/us")),
    "ramsey": (("A_m1", ""), ("A_0", ""), ("A_p1", ""), ("kappa", "1/us")),
    "hahn": (("A", ""), ("kappa", "1/us")),
    "t1": (("A", ""), ("kappa", "1/ms")),
    "gaussian": (("amplitude", ""), ("mean", ""), ("sigma", "")),
}
_QUANTITY = {"odmr_triplet": "contrast", "rabi": "contrast", "t1": "contrast",
             "ramsey": "visibility", "hahn": "visibility", "gaussian": None}
_SWEEP = {"odmr_triplet": "frequency_MHz", "rabi": "time_us", "ramsey": "time_us",
          "hahn": "time_us", "t1": "time_ms", "gaussian": None}
_INF = np.inf
_BOUNDS = {
    "odmr_triplet": ((0.0, 1.0), (-_INF, _INF), (1e-6, _INF)),
    "rabi": ((0.0, 2.0), (1e-9, _INF), (0.0, _INF)),
    "ramsey": ((0.0, _INF), (0.0, _INF), (0.0, _INF), (0.0, _INF)),
    "hahn": ((0.0, _INF), (0.0, _INF)),
    "t1": ((0.0, 1.0), (0.0, _INF)),
    "gaussian": ((0.0, _INF), (-_INF, _INF), (1e-300, _INF)),
}
MODEL_KINDS = ("odmr_triplet", "rabi", "ramsey", "hahn", "t1")


@dataclass(frozen=True)
class ModelSpec:
    """Which model to fit and the constants held fixed during the fit.

    ``stretch_exponent`` only matters for ``t1``; with ``free_stretch`` it
    becomes a third free parameter and the value here is just a default seed.
    ``gaussian`` is an auxiliary kind used by the histogram diagnostics.
    """

    kind: str
    hyperfine_mhz: float = HYPERFINE_14N_MHZ
    detuning_mhz: float = RAMSEY_DETUNING_MHZ
    stretch_exponent: float = 1.0
    free_stretch: bool = False

    def __post_init__(self):
        if self.kind not in _LAYOUT:
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.hyperfine_mhz < 0:
            raise ParameterError("hyperfine splitting must be >= 0")
        if self.kind == "ramsey" and not self.detuning_mhz > self.hyperfine_mhz:
            raise ParameterError("Ramsey detuning must exceed the hyperfine splitting")
        if not 0 < self.stretch_exponent <= 3:
            raise ParameterError("stretch exponent must lie in (0, 3]")

    @property
    def layout(self):
        lay = _LAYOUT[self.kind]
        if self.kind == "t1" and self.free_stretch:
            lay = lay + (("epsilon", ""),)
        return lay

    @property
    def param_names(self):
        return tuple(n for n, _ in self.layout)

    @property
    def param_units(self):
        return tuple(u for _, u in self.layout)

    @property
    def n_params(self):
        return len(self.layout)

    @property
    def quantity(self):
        return _QUANTITY[self.kind]

    @property
    def sweep_kind(self):
        return _SWEEP[self.kind]

    @property
    def code(self):
        if self.kind == "t1":
            return T1_FREE if self.free_stretch else T1
        return {"odmr_triplet": ODMR, "rabi": RABI, "ramsey": RAMSEY,
                "hahn": HAHN, "gaussian": GAUSSIAN}[self.kind]

    def fixed_vector(self):
        return np.array([self.hyperfine_mhz, self.detuning_mhz, self.stretch_exponent])

    def default_bounds(self):
        b = list(_BOUNDS[self.kind])
        if self.kind == "t1" and self.free_stretch:
            b.append((0.05, 3.0))
        lo = np.array([x for x, _ in b], dtype=np.float64)
        hi = np.array([x for _, x in b], dtype=np.float64)
        return lo, hi

    def check_sweep(self, sweep):
        if isinstance(sweep, SweepAxis) and self.sweep_kind is not None \
                and sweep.kind != self.sweep_kind:
            raise ModelMismatchError(
                f"model {self.kind} expects a {self.sweep_kind} sweep, got {sweep.kind}")

    def check_params(self, params):
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (self.n_params,):
            raise ParameterError(f"{self.kind} takes {self.n_params} parameters, got {p.shape}")
        names = self.param_names
        for name, v in zip(names, p):
            if not np.isfinite(v):
                raise ParameterError(f"{name} must be finite")
            if name == "kappa" and v < 0:
                raise ParameterError("decay rate must be >= 0")
            if name.startswith("A") and v < 0:
                raise ParameterError(f"amplitude {name} must be >= 0")
        if self.kind == "odmr_triplet" and p[2] <= 0:
            raise ParameterError("linewidth must be > 0")
        if self.kind == "rabi" and p[1] <= 0:
            raise ParameterError("Rabi frequency must be > 0")
        if self.kind == "t1" and self.free_stretch and not 0 < p[2] <= 3:
            raise ParameterError("stretch exponent must lie in (0, 3]")
        return p


def _sweep_values(sweep):
    return np.asarray(sweep.values if isinstance(sweep, SweepAxis) else sweep, dtype=np.float64)


# ---------------------------------------------------------------- numpy path

def lorentzian(f, f0, gamma):
    h2 = (0.5 * gamma) ** 2
    return h2 / ((f - f0) ** 2 + h2)


def eval_hahn(tau, A, kappa):
    """Hahn-echo visibility ``A * exp(-tau * kappa)``."""
    if np.any(np.asarray(kappa) < 0):
        raise ParameterError("decay rate must be >= 0")
    return A * np.exp(-np.asarray(tau, dtype=np.float64) * kappa)


def eval_t1(tau, A, kappa, epsilon=1.0):
    """T1 contrast ``1 - A * exp(-(tau * kappa) ** epsilon)``."""
    if np.any(np.asarray(epsilon) <= 0) or np.any(np.asarray(epsilon) > 3):
        raise ParameterError("stretch exponent must lie in (0, 3]")
    if np.any(np.asarray(kappa) < 0):
        raise ParameterError("decay rate must be >= 0")
    u = np.asarray(tau, dtype=np.float64) * kappa
    return 1.0 - A * np.exp(-(u ** epsilon))


def eval_rabi(tau, A, f, kappa):
    """Rabi contrast ``1 - A/2 * (1 - cos(2 pi f tau) exp(-tau kappa))``."""
    if np.any(np.asarray(f) <= 0):
        raise ParameterError("Rabi frequency must be > 0")
    if np.any(np.asarray(kappa) < 0):
        raise ParameterError("decay rate must be >= 0")
    tau = np.asarray(tau, dtype=np.float64)
    return 1.0 - 0.5 * A * (1.0 - np.cos(2 * np.pi * f * tau) * np.exp(-tau * kappa))


def eval_ramsey(tau, a_m1, a_0, a_p1, kappa, detuning=RAMSEY_DETUNING_MHZ,
                hyperfine=HYPERFINE_14N_MHZ):
    """Ramsey visibility: three hyperfine-detuned ``1 - sin`` terms under one decay.

    Setting ``a_m1 = 0`` gives the two-line form for 15N samples, with
    ``hyperfine`` then standing for that isotope's splitting.
    """
    if not detuning > hyperfine >= 0:
        raise ParameterError("need detuning > hyperfine >= 0")
    if np.any(np.asarray(kappa) < 0):
        raise ParameterError("decay rate must be >= 0")
    tau = np.asarray(tau, dtype=np.float64)
    w = 2 * np.pi * tau
    s = (a_m1 * (1 - np.sin(w * (detuning - hyperfine)))
         + a_0 * (1 - np.sin(w * detuning))
         + a_p1 * (1 - np.sin(w * (detuning + hyperfine))))
    return s * np.exp(-tau * kappa)


def eval_odmr(freq, A, f_center, gamma, hyperfine=HYPERFINE_14N_MHZ):
    """CW-ODMR contrast of one hyperfine triplet."""
    if np.any(np.asarray(gamma) <= 0):
        raise ParameterError("linewidth must be > 0")
    f = np.asarray(freq, dtype=np.float64)
    lines = (lorentzian(f, f_center - hyperfine, gamma) + lorentzian(f, f_center, gamma)
             + lorentzian(f, f_center + hyperfine, gamma))
    return 1.0 - A * lines


def eval_gaussian(x, amplitude, mean, sigma):
    x = np.asarray(x, dtype=np.float64)
    return amplitude * np.exp(-0.5 * ((x - mean) / sigma) ** 2)


def evaluate(spec: ModelSpec, params, sweep):
    """Model values for ``params`` over a sweep via the numpy path."""
    spec.check_sweep(sweep)
    p = spec.check_params(params)
    t = _sweep_values(sweep)
    k = spec.kind
    if k == "hahn":
        return eval_hahn(t, *p)
    if k == "t1":
        eps = p[2] if spec.free_stretch else spec.stretch_exponent
        return eval_t1(t, p[0], p[1], eps)
    if k == "rabi":
        return eval_rabi(t, *p)
    if k == "ramsey":
        return eval_ramsey(t, *p, detuning=spec.detuning_mhz, hyperfine=spec.hyperfine_mhz)
    if k == "odmr_triplet":
        return eval_odmr(t, *p, hyperfine=spec.hyperfine_mhz)
    return eval_gaussian(t, *p)


# ------------------------------------------------------------- compiled path

_TWO_PI = 2.0 * np.pi


@numba.njit(cache=True, nogil=True)
def _dlorentz(d, h):
    # value, d/df0 and d/dgamma of a unit-height Lorentzian at offset d = f - f0
    h2 = h * h
    den = d * d + h2
    den2 = den * den
    return h2 / den, 2.0 * d * h2 / den2, h * d * d / den2


@numba.njit(cache=True, nogil=True)
def model_point(kind, t, p, fixed, grad):
    """Value at one sweep point; partials are written into ``grad``."""
    if kind == HAHN:
        e = np.exp(-t * p[1])
        grad[0] = e
        grad[1] = -t * p[0] * e
        return p[0] * e
    if kind == T1 or kind == T1_FREE:
        eps = p[2] if kind == T1_FREE else fixed[2]
        u = t * p[1]
        if u > 0.0:
            w = u ** eps
            dw_dk = eps * w / p[1]
            logu = np.log(u)
        else:
            w = 0.0
            logu = 0.0
            if t == 0.0:
                dw_dk = 0.0
            elif eps == 1.0:
                dw_dk = t
            elif eps < 1.0:
                dw_dk = np.inf
            else:
                dw_dk = 0.0
        e = np.exp(-w)
        grad[0] = -e
        grad[1] = p[0] * e * dw_dk
        if kind == T1_FREE:
            grad[2] = p[0] * e * w * logu
        return 1.0 - p[0] * e
    if kind == RABI:
        ph = _TWO_PI * p[1] * t
        c = np.cos(ph)
        s = np.sin(ph)
        e = np.exp(-t * p[2])
        grad[0] = -0.5 * (1.0 - c * e)
        grad[1] = -np.pi * p[0] * t * s * e
        grad[2] = -0.5 * p[0] * c * t * e
        return 1.0 - 0.5 * p[0] * (1.0 - c * e)
    if kind == RAMSEY:
        hf = fixed[0]
        det = fixed[1]
        e = np.exp(-t * p[3])
        w = _TWO_PI * t
        g0 = (1.0 - np.sin(w * (det - hf))) * e
        g1 = (1.0 - np.sin(w * det)) * e
        g2 = (1.0 - np.sin(w * (det + hf))) * e
        v = p[0] * g0 + p[1] * g1 + p[2] * g2
        grad[0] = g0
        grad[1] = g1
        grad[2] = g2
        grad[3] = -t * v
        return v
    if kind == ODMR:
        hf = fixed[0]
        h = 0.5 * p[2]
        la, da, ga = _dlorentz(t - (p[1] - hf), h)
        lb, db, gb = _dlorentz(t - p[1], h)
        lc, dc, gc = _dlorentz(t - (p[1] + hf), h)
        lsum = la + lb + lc
        grad[0] = -lsum
        grad[1] = -p[0] * (da + db + dc)
        grad[2] = -p[0] * (ga + gb + gc)
        return 1.0 - p[0] * lsum
    # GAUSSIAN
    z = (t - p[1]) / p[2]
    e = np.exp(-0.5 * z * z)
    grad[0] = e
    grad[1] = p[0] * e * z / p[2]
    grad[2] = p[0] * e * z * z / p[2]
    return p[0] * e


@numba.njit(cache=True, nogil=True)
def model_eval(kind, t, p, fixed, out, jac):
    grad = np.empty(p.size)
    for i in range(t.size):
        out[i] = model_point(kind, t[i], p, fixed, grad)
        for j in range(p.size):
            jac[i, j] = grad[j]


def model_values_and_jacobian(spec: ModelSpec, params, sweep):
    t = _sweep_values(sweep)
    p = np.asarray(params, dtype=np.float64)
    out = np.empty(t.size)
    jac = np.empty((t.size, p.size))
    model_eval(spec.code, t, p, spec.fixed_vector(), out, jac)
    return out, jac


def jacobian(spec: ModelSpec, params, sweep) -> np.ndarray:
    """Analytic partials, shape ``(points, n_params)``."""
    spec.check_sweep(sweep)
    p = spec.check_params(params)
    return model_values_and_jacobian(spec, p, sweep)[1]
