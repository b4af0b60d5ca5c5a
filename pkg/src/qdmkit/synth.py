"""Synthetic cubes with known ground truth.

Noise is additive Gaussian from a counter-based generator so that any frame
can be regenerated on its own: frame ``p`` of stream ``s`` under seed ``k``
reads Philox4x64-10 with key ``(k, s)`` on the counter blocks
``(1, p, 0, 0)``, ``(2, p, 0, 0)``, ... (four words each, in order); the
raw 64-bit words are consumed in pairs ``(r1, r2)`` and mapped through
Box-Muller with ``u1 = ((r1 >> 11) + 1) / 2**53``, ``u2 = (r2 >> 11) / 2**53``,
emitting ``sqrt(-2 ln u1) cos(2 pi u2)`` then ``sqrt(-2 ln u1) sin(2 pi u2)``,
row-major over the frame.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datacube import DataCube, MapImage, SweepAxis
from .errors import DataError, ParameterError
from .models import (ModelSpec, eval_hahn, eval_odmr, eval_rabi, eval_ramsey,
                     eval_t1, lorentzian)
from .physics import (SpinStressConstants, StressMaps, ZERO_FIELD_SPLITTING_MHZ,
                      lineshifts_from_stress)
from .qdc import atomic_write_bytes, save_qdc

RNG_ALGORITHM = "philox4x64-10/box-muller/v1"
STREAM_CUBE, STREAM_BIREF, STREAM_ODMR, STREAM_TRUTH = 0, 1, 2, 3

_MASK64 = (1 << 64) - 1


def gaussian_frame(seed: int, stream: int, frame: int, n: int) -> np.ndarray:
    """``n`` standard normal deviates for one frame of one noise stream."""
    bg = np.random.Philox(key=np.array([seed & _MASK64, stream], dtype=np.uint64),
                          counter=np.array([0, frame, 0, 0], dtype=np.uint64))
    pairs = (n + 1) // 2
    raw = bg.random_raw(2 * pairs)
    u1 = ((raw[0::2] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0 ** -53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2 * np.pi * u2)
    z[1::2] = r * np.sin(2 * np.pi * u2)
    return z[:n]


@dataclass(eq=False)
class TruthMaps:
    """Ground-truth planes plus everything needed to regenerate the data."""

    kind: str
    params: dict
    noise_sigma: float = 0.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def shape(self):
        return next(iter(self.params.values())).shape

    def stacked(self, names):
        return np.stack([self.params[n] for n in names])


def _planes(params, names, shape=None):
    out = {}
    for n in names:
        if n not in params:
            raise ParameterError(f"missing truth plane {n!r}")
        out[n] = np.asarray(params[n], dtype=np.float64)
    shapes = {a.shape for a in out.values() if a.ndim}
    if len(shapes) > 1 or (shape is None and not shapes):
        raise DataError("truth planes must share one 2D shape")
    shape = shape or shapes.pop()
    return {n: np.broadcast_to(a, shape).copy() for n, a in out.items()}


def _check_admissible(spec: ModelSpec, planes):
    for n, a in planes.items():
        if not np.all(np.isfinite(a)):
            raise ParameterError(f"truth plane {n} has non-finite values")
        if (n == "kappa" or n.startswith("A")) and np.any(a < 0):
            raise ParameterError(f"truth plane {n} must be >= 0")
    if spec.kind == "odmr_triplet" and np.any(planes["gamma"] <= 0):
        raise ParameterError("linewidth must be > 0")
    if spec.kind == "rabi" and np.any(planes["f"] <= 0):
        raise ParameterError("Rabi frequency must be > 0")
    if "epsilon" in planes and np.any((planes["epsilon"] <= 0) | (planes["epsilon"] > 3)):
        raise ParameterError("stretch exponent must lie in (0, 3]")


def _model_frame(spec: ModelSpec, t, pl):
    k = spec.kind
    if k == "hahn":
        return eval_hahn(t, pl["A"], pl["kappa"])
    if k == "t1":
        eps = pl["epsilon"] if spec.free_stretch else spec.stretch_exponent
        return eval_t1(t, pl["A"], pl["kappa"], eps)
    if k == "rabi":
        return eval_rabi(t, pl["A"], pl["f"], pl["kappa"])
    if k == "ramsey":
        return eval_ramsey(t, pl["A_m1"], pl["A_0"], pl["A_p1"], pl["kappa"],
                           spec.detuning_mhz, spec.hyperfine_mhz)
    return eval_odmr(t, pl["A"], pl["f_center"], pl["gamma"], spec.hyperfine_mhz)


def generate_cube(truth, spec: ModelSpec, sweep: SweepAxis, noise_sigma: float = 0.0,
                  rng_seed: int = 0):
    """Evaluate ``spec`` at every pixel's truth parameters and add Gaussian noise.

    ``truth`` is a :class:`TruthMaps` or a mapping of parameter name to 2D
    plane (scalars broadcast when at least one plane is 2D).
    """
    spec.check_sweep(sweep)
    if noise_sigma < 0:
        raise ParameterError("noise sigma must be >= 0")
    params = truth.params if isinstance(truth, TruthMaps) else truth
    pl = _planes(params, spec.param_names)
    _check_admissible(spec, pl)
    h, w = next(iter(pl.values())).shape
    data = np.empty((len(sweep), h, w))
    for p, t in enumerate(sweep.values):
        data[p] = _model_frame(spec, t, pl)
        if noise_sigma > 0:
            data[p] += noise_sigma * gaussian_frame(rng_seed, STREAM_CUBE, p, h * w).reshape(h, w)
    out = TruthMaps(spec.kind, pl, float(noise_sigma), int(rng_seed),
                    {"spec": spec.__dict__.copy(), "sweep_kind": sweep.kind})
    return DataCube(sweep, spec.quantity, data), out


def generate_biref_stack(phi_deg, sin_delta, i0, angles_deg, noise_sigma: float = 0.0,
                         rng_seed: int = 0):
    """Polariser-angle intensity stack ``I0/2 * (1 + sin 2(a - phi) sin delta)``."""
    pl = _planes({"phi": phi_deg, "sin_delta": sin_delta, "I0": i0}, ("phi", "sin_delta", "I0"))
    if np.any(pl["I0"] < 0):
        raise ParameterError("I0 must be >= 0")
    if np.any(np.abs(pl["sin_delta"]) > 1):
        raise ParameterError("|sin delta| must be <= 1")
    angles = np.asarray(angles_deg, dtype=np.float64)
    if np.any((angles < 0) | (angles >= 180)) or np.unique(angles).size != angles.size:
        raise ParameterError("angles must be distinct and lie in [0, 180)")
    sweep = SweepAxis("angle_deg", angles)
    h, w = pl["phi"].shape
    data = np.empty((angles.size, h, w))
    phi = np.deg2rad(pl["phi"])
    for p, a in enumerate(np.deg2rad(sweep.values)):
        frame = 0.5 * pl["I0"] * (1 + np.sin(2 * (a - phi)) * pl["sin_delta"])
        if noise_sigma > 0:
            frame = frame + noise_sigma * gaussian_frame(rng_seed, STREAM_BIREF, p, h * w).reshape(h, w)
        data[p] = np.maximum(frame, 0.0)
    truth = TruthMaps("biref", pl, float(noise_sigma), int(rng_seed))
    return DataCube(sweep, "intensity", data), truth


def generate_odmr_scene(field_split_mhz, gamma, amplitude, hyperfine, sweep: SweepAxis,
                        stress: StressMaps,
                        constants: SpinStressConstants = SpinStressConstants(),
                        zero_field_mhz: float = ZERO_FIELD_SPLITTING_MHZ,
                        noise_sigma: float = 0.0, rng_seed: int = 0):
    """Eight-group CW-ODMR cube whose orientation shifts encode ``stress``.

    Orientation ``i`` has resonances at ``D + M_i -/+ field_split_mhz[i]``,
    where ``M`` are the lineshifts implied by ``stress``. The truth records
    group centres in frequency order, the pairing of groups to orientations,
    the lineshifts and the stress planes.
    """
    if sweep.kind != "frequency_MHz":
        raise DataError("an ODMR scene needs a frequency_MHz sweep")
    split = np.asarray(field_split_mhz, dtype=np.float64)
    if split.shape != (4,) or np.any(split <= 0):
        raise ParameterError("need four positive Zeeman half-splittings")
    amp = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (8,))
    if np.any(amp < 0) or gamma <= 0:
        raise ParameterError("amplitudes must be >= 0 and gamma > 0")
    M = lineshifts_from_stress(stress, constants).planes
    h, w = M.shape[1:]
    raw = np.concatenate([zero_field_mhz + M - split[:, None, None],
                          zero_field_mhz + M + split[:, None, None]])
    order = np.argsort(raw.reshape(8, -1).mean(axis=1), kind="stable")
    centers = raw[order]
    rank = np.empty(8, int)
    rank[order] = np.arange(8)
    pairing = tuple((int(rank[i]), int(rank[i + 4])) for i in range(4))

    f = sweep.values
    margin = hyperfine + 3 * gamma
    if centers.min() - margin < f[0] or centers.max() + margin > f[-1]:
        raise DataError("ODMR groups do not fit inside the sweep range")
    gaps = np.diff(centers, axis=0)
    halfwin = max(3 * gamma, 3 * hyperfine)
    collision = bool(np.any(gaps < 2 * halfwin))
    if collision:
        warnings.warn("ODMR groups closer than two analysis windows; fits will overlap",
                      RuntimeWarning, stacklevel=2)

    data = np.empty((f.size, h, w))
    for p, fp in enumerate(f):
        dip = np.zeros((h, w))
        for g in range(8):
            c = centers[g]
            dip += amp[g] * (lorentzian(fp, c - hyperfine, gamma) + lorentzian(fp, c, gamma)
                             + lorentzian(fp, c + hyperfine, gamma))
        frame = 1.0 - dip
        if noise_sigma > 0:
            frame += noise_sigma * gaussian_frame(rng_seed, STREAM_ODMR, p, h * w).reshape(h, w)
        data[p] = frame
    truth = TruthMaps(
        "odmr_scene",
        {"sigma_diag": stress.diag, "sigma_xy": stress.xy, "sigma_xz": stress.xz,
         "sigma_yz": stress.yz},
        float(noise_sigma), int(rng_seed),
        {"centers": centers, "pairing": pairing, "lineshifts": M, "collision": collision,
         "field_split_mhz": split.tolist(), "gamma": float(gamma), "amplitude": amp.tolist(),
         "hyperfine_mhz": float(hyperfine), "zero_field_mhz": float(zero_field_mhz),
         "a1": constants.a1, "a2": constants.a2})
    return DataCube(sweep, "contrast", data), truth


def gradient_map(height, width, low, high, axis=1):
    """Linear ramp from ``low`` to ``high`` along ``axis`` (1 = x, 0 = y)."""
    n = width if axis == 1 else height
    ramp = np.linspace(low, high, n)
    return np.broadcast_to(ramp[None, :] if axis == 1 else ramp[:, None], (height, width)).copy()


def stress_channel(height, width, peak_gpa=0.05, channel_frac=0.25, edge_frac=0.03,
                   shear_gpa=None, angle_deg=30.0) -> StressMaps:
    """A band of raised isometric stress bounded by two sharp linear edges.

    Shear components are confined to the edges: in-plane shear with opposite
    sign on the two edges, out-of-plane shear modulated along the band.
    """
    shear = 0.4 * peak_gpa if shear_gpa is None else shear_gpa
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    th = np.deg2rad(angle_deg)
    size = float(max(height, width))
    u = ((xx - width / 2) * np.cos(th) + (yy - height / 2) * np.sin(th)) / size
    v = (-(xx - width / 2) * np.sin(th) + (yy - height / 2) * np.cos(th)) / size
    half = channel_frac / 2
    e = edge_frac
    diag = peak_gpa * (1 / (1 + np.exp(-(u + half) / e)) - 1 / (1 + np.exp(-(u - half) / e)))
    g_left = np.exp(-0.5 * ((u + half) / e) ** 2)
    g_right = np.exp(-0.5 * ((u - half) / e) ** 2)
    xy = shear * (g_left - g_right)
    xz = 0.5 * shear * (g_left + g_right) * np.cos(2 * np.pi * v)
    yz = 0.5 * shear * (g_left - g_right) * np.sin(2 * np.pi * v)
    return StressMaps(diag, xy, xz, yz)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(type(obj).__name__)


def write_truth(out_dir, truth: TruthMaps, manifest: dict | None = None):
    """One MapImage QDC per truth plane plus ``truth.json``; returns written paths."""
    out_dir = Path(out_dir)
    written = []
    for name, plane in truth.params.items():
        path = out_dir / f"truth_{name}.qdc"
        save_qdc(path, MapImage(plane, "truth", ""))
        written.append(path)
    extra = {k: v for k, v in truth.extra.items() if k not in ("centers", "lineshifts")}
    doc = {"kind": truth.kind, "seed": truth.seed, "noise_sigma": truth.noise_sigma,
           "rng": RNG_ALGORITHM, "planes": sorted(truth.params), "extra": extra}
    if manifest:
        doc.update(manifest)
    path = out_dir / "truth.json"
    atomic_write_bytes(path, json.dumps(doc, indent=2, sort_keys=True, default=_jsonable).encode())
    written.append(path)
    return written
