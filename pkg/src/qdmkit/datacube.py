"""In-memory data cubes, reductions and cropping.

Storage order is frame-major: ``data[point, y, x]`` for reduced cubes and
``data[point, channel, y, x]`` for raw two-channel stacks. Containers are
immutable after construction (their arrays are flagged read-only), so they
can be shared freely between fitting threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ReductionError

SWEEP_KINDS = ("frequency_MHz", "time_us", "angle_deg", "time_ms")
QUANTITIES = ("contrast", "visibility", "intensity")
CHANNEL_LAYOUTS = ("signal_reference", "plus_minus")


def _frozen(arr, dtype):
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out is arr or not out.flags.owndata:
        out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SweepAxis:
    """Third (dependent-variable) axis of a cube."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise DataError(f"unknown sweep kind {self.kind!r}; expected one of {SWEEP_KINDS}")
        v = _frozen(self.values, np.float64)
        if v.ndim != 1 or v.size < 4:
            raise DataError("a sweep axis needs at least 4 values")
        if not np.all(np.isfinite(v)):
            raise DataError("sweep values must be finite")
        if np.any(np.diff(v) <= 0):
            raise DataError("sweep values must be strictly increasing")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        return (isinstance(other, SweepAxis) and self.kind == other.kind
                and np.array_equal(self.values, other.values))

    def subset(self, index) -> "SweepAxis":
        return SweepAxis(self.kind, self.values[index])


@dataclass(frozen=True, eq=False)
class RawStack:
    """Two-channel acquisition: ``data[point, channel, y, x]`` as float32.

    For ``signal_reference`` channel 0 is the MW-on signal and channel 1 the
    MW-off reference. For ``plus_minus`` channel 0 is I+ and channel 1 is I-.
    """

    sweep: SweepAxis
    channels: str
    data: np.ndarray

    def __post_init__(self):
        if self.channels not in CHANNEL_LAYOUTS:
            raise DataError(f"unknown channel layout {self.channels!r}")
        d = _frozen(self.data, np.float32)
        if d.ndim != 4 or d.shape[1] != 2 or d.shape[0] != len(self.sweep):
            raise DataError(f"raw stack shape {d.shape} does not match "
                            f"({len(self.sweep)}, 2, height, width)")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise DataError("raw intensities must be finite and non-negative")
        object.__setattr__(self, "data", d)

    @property
    def points(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]


@dataclass(frozen=True, eq=False)
class DataCube:
    """Reduced cube, ``data[point, y, x]`` held in float64."""

    sweep: SweepAxis
    quantity: str
    data: np.ndarray

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise DataError(f"unknown quantity {self.quantity!r}")
        d = _frozen(self.data, np.float64)
        if d.ndim != 3 or d.shape[0] != len(self.sweep):
            raise DataError(f"cube shape {d.shape} does not match "
                            f"({len(self.sweep)}, height, width)")
        if not np.all(np.isfinite(d)):
            raise DataError("cube values must be finite")
        object.__setattr__(self, "data", d)

    @property
    def points(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def mean_trace(self) -> np.ndarray:
        return self.data.reshape(self.points, -1).mean(axis=1)


@dataclass(frozen=True, eq=False)
class MapImage:
    """A single 2D result map with an explicit invalid-pixel mask.

    ``mask`` is True where the pixel is invalid; those pixels hold NaN.
    NaN anywhere else is rejected.
    """

    data: np.ndarray
    label: str = ""
    unit: str = ""
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise DataError("a map must be two-dimensional")
        m = np.zeros(d.shape, bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if m.shape != d.shape:
            raise DataError("mask shape does not match map shape")
        if np.any(~np.isfinite(d) & ~m):
            raise DataError("non-finite map values must be covered by the mask")
        d[m] = np.nan
        d.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "mask", m)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def valid_values(self) -> np.ndarray:
        return self.data[~self.mask]


def contrast_reduce(stack: RawStack) -> DataCube:
    """MW-on over MW-off ratio, computed in double precision."""
    if stack.channels != "signal_reference":
        raise DataError("contrast reduction needs a signal_reference stack")
    ref = stack.data[:, 1].astype(np.float64)
    bad = ref <= 0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ReductionError(f"reference intensity <= 0 at (point, y, x) = {idx}", idx)
    return DataCube(stack.sweep, "contrast", stack.data[:, 0].astype(np.float64) / ref)


def visibility_reduce(stack: RawStack) -> DataCube:
    """Normalised difference (I+ - I-) / (I+ + I-), computed in double precision."""
    if stack.channels != "plus_minus":
        raise DataError("visibility reduction needs a plus_minus stack")
    plus = stack.data[:, 0].astype(np.float64)
    minus = stack.data[:, 1].astype(np.float64)
    total = plus + minus
    bad = total <= 0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ReductionError(f"I+ + I- is zero at (point, y, x) = {idx}", idx)
    return DataCube(stack.sweep, "visibility", (plus - minus) / total)


def pixel_series(cube: DataCube, x: int, y: int):
    """Return ``(sweep, trace)`` for one pixel."""
    if not (0 <= x < cube.width and 0 <= y < cube.height):
        raise IndexError(f"pixel ({x}, {y}) outside {cube.width}x{cube.height} cube")
    return cube.sweep, cube.data[:, y, x].copy()


def crop(obj, x0: int, y0: int, w: int, h: int):
    """Spatial sub-window of a RawStack, DataCube or MapImage.

    Pixel ``(x0 + i, y0 + j)`` of the input becomes ``(i, j)``.
    """
    if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > obj.width or y0 + h > obj.height:
        raise IndexError(f"window x0={x0} y0={y0} w={w} h={h} exceeds "
                         f"{obj.width}x{obj.height} bounds")
    sl = (slice(y0, y0 + h), slice(x0, x0 + w))
    if isinstance(obj, RawStack):
        return RawStack(obj.sweep, obj.channels, obj.data[(Ellipsis,) + sl])
    if isinstance(obj, DataCube):
        return DataCube(obj.sweep, obj.quantity, obj.data[(slice(None),) + sl])
    if isinstance(obj, MapImage):
        return MapImage(obj.data[sl], obj.label, obj.unit, obj.mask[sl])
    raise TypeError(f"cannot crop {type(obj).__name__}")
