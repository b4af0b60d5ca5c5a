"""QDC container: little-endian binary files for stacks, cubes and maps.

Layout::

    magic      4s   b"QDC1"
    version    u32  1
    kind       u8   0 = RawStack, 1 = DataCube, 2 = MapImage
    code       u8   channel layout / quantity / map label code
    reserved   u16  0
    width      u32
    height     u32
    points     u32
    channels   u32
    sweep      f64 * points
    sweep_kind u8   (255 for maps)
    pad        7 bytes of zero
    payload    f32 in storage order
    crc        u64  CRC-64/XZ of the payload bytes

Values are stored as float32. Cubes held in float64 are rounded on save, so
``load(save(x))`` is exact only for float32-representable values, while
``save(load(file))`` reproduces the file byte for byte. Masked map pixels are
stored as NaN and the mask is rebuilt from them on load.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from fastcrc import crc64

from .datacube import (CHANNEL_LAYOUTS, QUANTITIES, SWEEP_KINDS, DataCube,
                       MapImage, RawStack, SweepAxis)
from .errors import (BadMagicError, ChecksumMismatchError,
                     NonMonotonicSweepError, QDCFormatError,
                     TruncatedPayloadError, VersionMismatchError)

MAGIC = b"QDC1"
VERSION = 1
KIND_RAW, KIND_CUBE, KIND_MAP = 0, 1, 2
NO_SWEEP = 255
UNLABELED = 255

_HEAD = struct.Struct("<4sIBBHIIII")
_TAIL = struct.Struct("<Q")

# (label, unit) pairs that survive a round trip; anything else is stored as
# UNLABELED and comes back with empty label and unit.
MAP_LABELS = (
    ("value", ""),
    ("chisq", "sum of squared residuals"),
    ("status", "code"),
    ("iterations", "count"),
    ("A", ""),
    ("f_center", "MHz"),
    ("gamma", "MHz"),
    ("f", "MHz"),
    ("kappa", "1/us"),
    ("kappa", "1/ms"),
    ("epsilon", ""),
    ("A_m1", ""),
    ("A_0", ""),
    ("A_p1", ""),
    ("lineshift", "MHz"),
    ("sigma_diag", "GPa"),
    ("sigma_xy", "GPa"),
    ("sigma_xz", "GPa"),
    ("sigma_yz", "GPa"),
    ("phi", "deg"),
    ("sin_delta", ""),
    ("I0", ""),
    ("stress_magnitude", "Pa"),
    ("truth", ""),
    ("amplitude", ""),
    ("mean", ""),
    ("sigma", ""),
)


def crc64_xz(buf) -> int:
    return crc64.xz(bytes(buf))


def to_bytes(obj) -> bytes:
    if isinstance(obj, RawStack):
        kind, code = KIND_RAW, CHANNEL_LAYOUTS.index(obj.channels)
        channels, sweep = 2, obj.sweep
        payload = obj.data
    elif isinstance(obj, DataCube):
        kind, code = KIND_CUBE, QUANTITIES.index(obj.quantity)
        channels, sweep = 1, obj.sweep
        payload = obj.data
    elif isinstance(obj, MapImage):
        kind = KIND_MAP
        key = (obj.label, obj.unit)
        code = MAP_LABELS.index(key) if key in MAP_LABELS else UNLABELED
        channels, sweep = 1, None
        payload = obj.data[None]
    else:
        raise TypeError(f"cannot store {type(obj).__name__} in a QDC file")

    points = payload.shape[0]
    height, width = payload.shape[-2:]
    if sweep is None:
        sweep_values = np.zeros(1)
        sweep_code = NO_SWEEP
    else:
        sweep_values = sweep.values
        sweep_code = SWEEP_KINDS.index(sweep.kind)
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    parts = [
        _HEAD.pack(MAGIC, VERSION, kind, code, 0, width, height, points, channels),
        np.asarray(sweep_values, dtype="<f8").tobytes(),
        struct.pack("<B7x", sweep_code),
        body,
        _TAIL.pack(crc64_xz(body)),
    ]
    return b"".join(parts)


def from_bytes(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEAD.size:
        raise TruncatedPayloadError("file shorter than the fixed header")
    magic, version, kind, code, reserved, width, height, points, channels = _HEAD.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"QDC version {version}, this reader supports {VERSION}")
    if reserved != 0:
        raise QDCFormatError("reserved header field is non-zero")
    if kind not in (KIND_RAW, KIND_CUBE, KIND_MAP):
        raise QDCFormatError(f"unknown object kind {kind}")
    expected_channels = {KIND_RAW: 2, KIND_CUBE: 1, KIND_MAP: 1}[kind]
    if channels != expected_channels:
        raise QDCFormatError(f"object kind {kind} needs {expected_channels} channels, header says {channels}")
    if kind == KIND_MAP and points != 1:
        raise QDCFormatError("map images must have points = 1")

    off = _HEAD.size
    sweep_end = off + 8 * points + 8
    if len(buf) < sweep_end:
        raise TruncatedPayloadError("file ends inside the sweep block")
    sweep_values = np.frombuffer(buf, dtype="<f8", count=points, offset=off).astype(np.float64)
    sweep_code = buf[off + 8 * points]
    if any(buf[off + 8 * points + 1:sweep_end]):
        raise QDCFormatError("non-zero padding after sweep kind")
    if points > 1 and np.any(~(np.diff(sweep_values) > 0)):
        raise NonMonotonicSweepError("sweep values are not strictly increasing")

    n = points * channels * height * width
    payload_end = sweep_end + 4 * n
    if len(buf) < payload_end + _TAIL.size:
        have = max(len(buf) - sweep_end - _TAIL.size, 0) // 4
        raise TruncatedPayloadError(f"header declares {n} values, file holds {have}")
    if len(buf) > payload_end + _TAIL.size:
        raise QDCFormatError("trailing bytes after checksum")
    body = buf[sweep_end:payload_end]
    (stored,) = _TAIL.unpack_from(buf, payload_end)
    if crc64_xz(body) != stored:
        raise ChecksumMismatchError("payload checksum mismatch")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32)

    if kind == KIND_MAP:
        if sweep_code != NO_SWEEP:
            raise QDCFormatError("map images carry no sweep kind")
        label, unit = MAP_LABELS[code] if code < len(MAP_LABELS) else ("", "")
        values = data.reshape(height, width).astype(np.float64)
        return MapImage(values, label, unit, np.isnan(values))

    if sweep_code >= len(SWEEP_KINDS):
        raise QDCFormatError(f"unknown sweep kind code {sweep_code}")
    sweep = SweepAxis(SWEEP_KINDS[sweep_code], sweep_values)
    if kind == KIND_RAW:
        if code >= len(CHANNEL_LAYOUTS):
            raise QDCFormatError(f"unknown channel layout code {code}")
        return RawStack(sweep, CHANNEL_LAYOUTS[code], data.reshape(points, 2, height, width))
    if code >= len(QUANTITIES):
        raise QDCFormatError(f"unknown quantity code {code}")
    return DataCube(sweep, QUANTITIES[code], data.reshape(points, height, width))


def atomic_write_bytes(path, blob: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_qdc(path, obj):
    atomic_write_bytes(path, to_bytes(obj))


def load_qdc(path):
    return from_bytes(Path(path).read_bytes())
