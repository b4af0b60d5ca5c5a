"""Stress tensor from NV lineshifts, and stress from optical birefringence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datacube import DataCube, MapImage
from .errors import DataError, ModelMismatchError, ParameterError

ZERO_FIELD_SPLITTING_MHZ = 2870.0

# outermost-with-innermost pairing of eight frequency-ordered groups
DEFAULT_PAIRING = ((0, 7), (1, 6), (2, 5), (3, 4))

# rows: diag, xy, xz, yz combinations of the four orientation lineshifts
_SIGNS = np.array([[1, 1, 1, 1],
                   [1, 1, -1, -1],
                   [1, -1, 1, -1],
                   [1, -1, -1, 1]], dtype=np.float64)


@dataclass(frozen=True)
class SpinStressConstants:
    a1: float = 4.86   # MHz / GPa
    a2: float = -3.7   # MHz / GPa

    def __post_init__(self):
        if not self.a1 > 0:
            raise ParameterError("a1 must be positive")
        if self.a2 == 0:
            raise ParameterError("a2 must be non-zero")


@dataclass(frozen=True, eq=False)
class OrientationLineshifts:
    """Common-mode shift of each NV orientation's resonance pair, in MHz."""

    planes: np.ndarray              # (4, height, width)
    mask: np.ndarray | None = None  # (height, width), True = invalid
    reference: str = ""

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != 4:
            raise DataError("lineshifts need four equally sized planes")
        m = np.zeros(p.shape[1:], bool) if self.mask is None else np.asarray(self.mask, bool)
        if m.shape != p.shape[1:]:
            raise DataError("mask does not match lineshift planes")
        if np.any(~np.isfinite(p[:, ~m])):
            raise DataError("unmasked lineshifts must be finite")
        object.__setattr__(self, "planes", p)
        object.__setattr__(self, "mask", m)

    def maps(self):
        return [MapImage(np.where(self.mask, np.nan, p), "lineshift", "MHz", self.mask)
                for p in self.planes]


@dataclass(frozen=True, eq=False)
class StressMaps:
    """Isometric and shear stress components in GPa."""

    diag: np.ndarray
    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, n), dtype=np.float64) for n in ("diag", "xy", "xz", "yz")]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 2:
            raise DataError("stress planes must share one 2D shape")
        for n, a in zip(("diag", "xy", "xz", "yz"), arrs):
            object.__setattr__(self, n, a)
        m = np.zeros(arrs[0].shape, bool) if self.mask is None else np.asarray(self.mask, bool)
        object.__setattr__(self, "mask", m)

    def stack(self):
        return np.stack([self.diag, self.xy, self.xz, self.yz])

    def maps(self):
        return {f"sigma_{n}": MapImage(np.where(self.mask, np.nan, getattr(self, n)),
                                       f"sigma_{n}", "GPa", self.mask)
                for n in ("diag", "xy", "xz", "yz")}


def _check_pairing(pairing):
    flat = [i for pair in pairing for i in pair]
    if len(pairing) != 4 or any(len(p) != 2 for p in pairing) or sorted(flat) != list(range(8)):
        raise DataError(f"pairing {pairing!r} must match the eight groups into four pairs")


def lineshifts_from_centers(centers, mask=None, pairing=DEFAULT_PAIRING,
                            reference="spatial_median",
                            zero_field_mhz=ZERO_FIELD_SPLITTING_MHZ) -> OrientationLineshifts:
    """Orientation lineshifts from eight fitted group-centre maps.

    ``centers`` has shape ``(8, height, width)`` in MHz, ordered as the groups
    were found. Each orientation's pair midpoint is referenced either to its
    own spatial median over valid pixels or to a fixed zero-field splitting.
    """
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim != 3 or c.shape[0] != 8:
        raise DataError("need eight centre maps")
    _check_pairing(pairing)
    m = np.zeros(c.shape[1:], bool) if mask is None else np.asarray(mask, bool).copy()
    m |= ~np.all(np.isfinite(c), axis=0)
    mid = np.stack([0.5 * (c[lo] + c[hi]) for lo, hi in pairing])
    if reference == "spatial_median":
        if m.all():
            raise DataError("no valid pixels to take a spatial median over")
        ref = np.array([np.median(p[~m]) for p in mid])
    elif reference == "fixed_D":
        ref = np.full(4, float(zero_field_mhz))
    else:
        raise ParameterError(f"unknown lineshift reference {reference!r}")
    planes = mid - ref[:, None, None]
    planes[:, m] = np.nan
    return OrientationLineshifts(planes, m, reference)


def lineshifts_from_odmr(results, pairing=DEFAULT_PAIRING, reference="spatial_median",
                         zero_field_mhz=ZERO_FIELD_SPLITTING_MHZ) -> OrientationLineshifts:
    """Same as :func:`lineshifts_from_centers`, taking eight ODMR ``FitResultCube``."""
    if len(results) != 8:
        raise DataError(f"need eight ODMR group results, got {len(results)}")
    centers = np.stack([r.param("f_center") for r in results])
    mask = np.zeros(centers.shape[1:], bool)
    for r in results:
        mask |= ~r.converged
    return lineshifts_from_centers(centers, mask, pairing, reference, zero_field_mhz)


def stress_tensor(lineshifts: OrientationLineshifts,
                  constants: SpinStressConstants = SpinStressConstants()) -> StressMaps:
    """Diagonal and shear stress (GPa) from four orientation lineshifts (MHz)."""
    m1, m2, m3, m4 = lineshifts.planes
    a1, a2 = constants.a1, constants.a2
    return StressMaps(
        diag=(m1 + m2 + m3 + m4) / (4 * a1),
        xy=(m1 + m2 - m3 - m4) / (8 * a2),
        xz=(m1 - m2 + m3 - m4) / (8 * a2),
        yz=(m1 - m2 - m3 + m4) / (8 * a2),
        mask=lineshifts.mask,
    )


def lineshifts_from_stress(stress: StressMaps,
                           constants: SpinStressConstants = SpinStressConstants()
                           ) -> OrientationLineshifts:
    """Inverse of :func:`stress_tensor`.

    The sign matrix is a 4x4 Hadamard matrix, so its inverse is its transpose
    over four.
    """
    scale = np.array([4 * constants.a1, 8 * constants.a2, 8 * constants.a2, 8 * constants.a2])
    s = stress.stack() * scale[:, None, None]
    planes = np.tensordot(_SIGNS.T, s, axes=1) / 4.0
    return OrientationLineshifts(planes, stress.mask, "from_stress")


@dataclass(frozen=True)
class BirefOptics:
    wavelength_m: float = 530e-9
    thickness_m: float = 0.5e-3
    refractive_index: float = 2.42
    q_iso: float = 0.3e-12     # 1 / Pa

    def __post_init__(self):
        if not (self.wavelength_m > 0 and self.thickness_m > 0
                and self.refractive_index > 0 and self.q_iso > 0):
            raise ParameterError("optics constants must be positive")


@dataclass(frozen=True, eq=False)
class BirefringenceResult:
    phi: MapImage          # degrees in [0, 180)
    sin_delta: MapImage
    i0: MapImage
    stress: MapImage       # Pa
    ambiguous: np.ndarray  # sin(delta) > 0.999, retardance may have wrapped
    optics: BirefOptics


def biref_invert(stack: DataCube, isotropic_tol: float = 1e-12):
    """Per-pixel stress angle, sin(retardance) and I0 from a polariser-angle stack.

    Transmitted intensity is linear in ``(1, sin 2a, cos 2a)``, so each pixel
    is a three-term linear least-squares problem sharing one design matrix.
    The output takes the representative with ``sin(delta) >= 0`` and the angle
    in ``[0, 180)`` degrees.

    Returns
    -------
    phi, sin_delta, i0 : MapImage
        ``phi`` is masked where the pixel is isotropic (no defined axis);
        all three are masked where the fitted mean intensity is not positive.
    """
    if stack.sweep.kind != "angle_deg":
        raise ModelMismatchError("birefringence inversion needs an angle_deg sweep")
    a = np.deg2rad(stack.sweep.values)
    design = np.stack([np.ones_like(a), np.sin(2 * a), np.cos(2 * a)], axis=1)
    if np.linalg.matrix_rank(design) < 3:
        raise DataError("polariser angles do not determine the three harmonics")
    frames = stack.data.reshape(stack.points, -1)
    coef, *_ = np.linalg.lstsq(design, frames, rcond=None)
    c0, cs, cc = (c.reshape(stack.height, stack.width) for c in coef)

    bad = ~(c0 > 0)
    amp = np.hypot(cs, cc)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin_d = np.where(bad, np.nan, amp / c0)
    iso = ~bad & (amp <= isotropic_tol * c0)
    sin_d[iso] = 0.0
    sin_d = np.where(bad, np.nan, np.minimum(sin_d, 1.0))
    phi = np.mod(np.rad2deg(0.5 * np.arctan2(-cc, cs)), 180.0)
    phi = np.where(phi >= 180.0, 0.0, phi)
    phi_mask = bad | iso
    phi = np.where(phi_mask, np.nan, phi)
    i0 = np.where(bad, np.nan, 2 * c0)
    return (MapImage(phi, "phi", "deg", phi_mask),
            MapImage(sin_d, "sin_delta", "", bad),
            MapImage(i0, "I0", "", bad))


def stress_magnitude(sin_delta, optics: BirefOptics = BirefOptics()):
    """Stress magnitude in Pa from sin(retardance), principal-value retardance.

    Accepts a MapImage (returns a MapImage with the same mask) or an array.
    """
    is_map = isinstance(sin_delta, MapImage)
    s = sin_delta.data if is_map else np.asarray(sin_delta, dtype=np.float64)
    valid = s[np.isfinite(s)]
    if np.any(valid > 1 + 1e-9) or np.any(valid < -1e-9):
        raise ParameterError("sin(delta) must lie in [0, 1]")
    delta = np.arcsin(np.clip(s, 0.0, 1.0))
    n3 = optics.refractive_index ** 3
    sigma = (2.0 / (3.0 * np.pi)) * delta * optics.wavelength_m / (optics.thickness_m * n3 * optics.q_iso)
    if is_map:
        return MapImage(sigma, "stress_magnitude", "Pa", sin_delta.mask)
    return sigma


def analyze_birefringence(stack: DataCube, optics: BirefOptics = BirefOptics()) -> BirefringenceResult:
    phi, sin_d, i0 = biref_invert(stack)
    stress = stress_magnitude(sin_d, optics)
    ambiguous = ~sin_d.mask & (np.nan_to_num(sin_d.data) > 0.999)
    return BirefringenceResult(phi, sin_d, i0, stress, ambiguous, optics)
