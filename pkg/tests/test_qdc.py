import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from qdmkit.datacube import DataCube, MapImage, RawStack, SweepAxis
from qdmkit.errors import (BadMagicError, ChecksumMismatchError, NonMonotonicSweepError,
                           QDCFormatError, TruncatedPayloadError, VersionMismatchError)
from qdmkit.qdc import crc64_xz, from_bytes, load_qdc, save_qdc, to_bytes


def crc64_xz_bitwise(data: bytes) -> int:
    """Reflected CRC-64/ECMA-182 with inverted init and output, one bit at a time."""
    poly = 0xC96C5795D7870F42
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


def test_crc_check_value():
    assert crc64_xz(b"123456789") == 0x995DC9BBDF1939FA
    assert crc64_xz_bitwise(b"123456789") == 0x995DC9BBDF1939FA


@given(st.binary(max_size=300))
@settings(max_examples=50, deadline=None)
def test_crc_matches_bitwise_oracle(blob):
    assert crc64_xz(blob) == crc64_xz_bitwise(blob)


def _cube(points=10, h=3, w=4, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.random((points, h, w)).astype(np.float32)
    return DataCube(SweepAxis("frequency_MHz", 2800 + np.arange(points) * 0.5), "contrast", data)


def test_header_layout():
    blob = to_bytes(_cube())
    magic, version, kind, code, _, w, h, points, ch = struct.unpack_from("<4sIBBHIIII", blob)
    assert (magic, version, kind, w, h, points, ch) == (b"QDC1", 1, 1, 4, 3, 10, 1)
    assert len(blob) == 28 + 8 * 10 + 8 + 4 * 120 + 8


def test_round_trips(tmp_path):
    cube = _cube()
    path = tmp_path / "c.qdc"
    save_qdc(path, cube)
    back = load_qdc(path)
    np.testing.assert_array_equal(back.data, cube.data)
    assert back.sweep == cube.sweep and back.quantity == "contrast"
    assert to_bytes(back) == path.read_bytes()

    raw = RawStack(SweepAxis("time_us", np.arange(6.0)), "plus_minus",
                   np.random.default_rng(1).random((6, 2, 2, 3)).astype(np.float32))
    rb = from_bytes(to_bytes(raw))
    assert rb.channels == "plus_minus"
    np.testing.assert_array_equal(rb.data, raw.data)

    mask = np.zeros((3, 4), bool)
    mask[1, 2] = True
    m = MapImage(np.ones((3, 4)), "f", "MHz", mask)
    mb = from_bytes(to_bytes(m))
    assert (mb.label, mb.unit) == ("f", "MHz")
    np.testing.assert_array_equal(mb.mask, mask)


@given(arrays(np.float32, (6, 2, 3), elements=st.floats(-1e6, 1e6, width=32)))
@settings(max_examples=30, deadline=None)
def test_save_of_load_is_byte_identity(data):
    blob = to_bytes(DataCube(SweepAxis("time_ms", np.linspace(0.1, 3, 6)), "visibility", data))
    assert to_bytes(from_bytes(blob)) == blob


def test_bad_magic():
    blob = bytearray(to_bytes(_cube()))
    blob[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        from_bytes(bytes(blob))


def test_truncated_payload():
    # header claims 10 points, file carries 9 frames
    blob = to_bytes(_cube())
    cut = blob[:-8 - 4 * 12]
    with pytest.raises(TruncatedPayloadError):
        from_bytes(cut)


def test_version_checksum_and_sweep_errors():
    blob = bytearray(to_bytes(_cube()))
    bad = bytearray(blob)
    bad[4] = 2
    with pytest.raises(VersionMismatchError):
        from_bytes(bytes(bad))
    bad = bytearray(blob)
    bad[-20] ^= 0x01
    with pytest.raises(ChecksumMismatchError):
        from_bytes(bytes(bad))
    bad = bytearray(blob)
    struct.pack_into("<d", bad, 28 + 8, 1e9)
    with pytest.raises(NonMonotonicSweepError):
        from_bytes(bytes(bad))
    with pytest.raises(QDCFormatError):
        from_bytes(bytes(blob) + b"\0")


def test_error_types_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedPayloadError, NonMonotonicSweepError,
             ChecksumMismatchError}
    assert len(kinds) == 5
    assert all(issubclass(k, QDCFormatError) for k in kinds)


def test_atomic_save_leaves_no_temp_files(tmp_path):
    save_qdc(tmp_path / "a.qdc", _cube())
    assert [p.name for p in tmp_path.iterdir()] == ["a.qdc"]
