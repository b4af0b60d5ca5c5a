import warnings

import numpy as np
import pytest

from qdmkit.datacube import SweepAxis
from qdmkit.errors import DataError, ParameterError
from qdmkit.fitengine import fit_cube, seed_by_dicing
from qdmkit.models import HYPERFINE_14N_MHZ, ModelSpec, evaluate
from qdmkit.physics import SpinStressConstants, StressMaps, biref_invert
from qdmkit.synth import (RNG_ALGORITHM, gaussian_frame, generate_biref_stack, generate_cube,
                          generate_odmr_scene, gradient_map, stress_channel)

TAU = SweepAxis("time_us", np.linspace(0, 3, 60))
RABI = ModelSpec("rabi")
FREQ = SweepAxis("frequency_MHz", np.arange(2760, 2980.001, 0.25))


def _truth(n=8):
    return {"A": np.full((n, n), 0.04), "f": gradient_map(n, n, 0.8, 1.2), "kappa": np.full((n, n), 0.5)}


def test_noiseless_cube_is_model():
    cube, truth = generate_cube(_truth(), RABI, TAU)
    p = np.array([truth.params[k][3, 5] for k in RABI.param_names])
    np.testing.assert_array_equal(cube.data[:, 3, 5], evaluate(RABI, p, TAU))


def test_same_seed_same_cube():
    a, _ = generate_cube(_truth(), RABI, TAU, 0.01, 42)
    b, _ = generate_cube(_truth(), RABI, TAU, 0.01, 42)
    c, _ = generate_cube(_truth(), RABI, TAU, 0.01, 43)
    assert a.data.tobytes() == b.data.tobytes() and not np.array_equal(a.data, c.data)


def test_gaussian_frames_are_standard_normal():
    z = np.concatenate([gaussian_frame(7, 0, k, 10_000) for k in range(10)])
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02
    assert not np.array_equal(gaussian_frame(7, 0, 0, 8), gaussian_frame(7, 1, 0, 8))
    assert "philox" in RNG_ALGORITHM


_M64 = (1 << 64) - 1


def philox4x64_10(ctr, key):
    """Pure-Python Philox4x64-10 block function (published round constants)."""
    c, k = list(ctr), list(key)
    for _ in range(10):
        p0 = 0xD2E7470EE14C6C93 * c[0]
        p1 = 0xCA5A826395121157 * c[2]
        c = [(p1 >> 64) ^ c[1] ^ k[0], p1 & _M64, (p0 >> 64) ^ c[3] ^ k[1], p0 & _M64]
        k = [(k[0] + 0x9E3779B97F4A7C15) & _M64, (k[1] + 0xBB67AE8584CAA73B) & _M64]
    return c


def reference_frame(seed, stream, frame, n):
    words = []
    block = 1
    while len(words) < n + (n % 2):
        words += philox4x64_10([block, frame, 0, 0], [seed, stream])
        block += 1
    out = []
    for r1, r2 in zip(words[0::2], words[1::2]):
        u1 = ((r1 >> 11) + 1) * 2.0 ** -53
        u2 = (r2 >> 11) * 2.0 ** -53
        rad = np.sqrt(-2.0 * np.log(u1))
        out += [rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)]
    return np.array(out[:n])


@pytest.mark.parametrize("seed, stream, frame, n", [(0, 0, 0, 4), (12345, 2, 59, 11), (2**63, 3, 7, 9)])
def test_frames_match_independent_generator(seed, stream, frame, n):
    np.testing.assert_array_equal(gaussian_frame(seed, stream, frame, n),
                                  reference_frame(seed, stream, frame, n))


def test_rabi_64_rms_under_one_percent():
    cube, truth = generate_cube(_truth(64), RABI, TAU, 0.002, 5)
    res = fit_cube(cube, RABI, seed_by_dicing(cube, RABI, 8))
    rel = res.param("f") / truth.params["f"] - 1
    assert np.sqrt(np.mean(rel ** 2)) < 0.01


def test_noise_ladder_monotone():
    rms = []
    for sigma in (0.001, 0.003, 0.009):
        cube, truth = generate_cube(_truth(40), RABI, TAU, sigma, 8)
        res = fit_cube(cube, RABI, seed_by_dicing(cube, RABI, 4))
        ok = res.converged
        rms.append(np.sqrt(np.mean((res.param("f")[ok] / truth.params["f"][ok] - 1) ** 2)))
    assert rms[0] < rms[1] < rms[2]


def test_generate_cube_rejects_bad_input():
    with pytest.raises(ParameterError):
        generate_cube(_truth(), RABI, TAU, -1.0)
    bad = _truth()
    bad["kappa"] = -bad["kappa"]
    with pytest.raises(ParameterError):
        generate_cube(bad, RABI, TAU)


def test_biref_generator_identities():
    ones = np.ones((2, 2))
    angles = np.arange(18) * 10.0
    iso, _ = generate_biref_stack(30 * ones, 0 * ones, 3 * ones, angles)
    np.testing.assert_allclose(iso.data, 1.5)
    a, _ = generate_biref_stack(20 * ones, 0.4 * ones, ones, angles)
    b, _ = generate_biref_stack(110 * ones, -0.4 * ones, ones, angles)
    np.testing.assert_allclose(a.data, b.data, atol=1e-15)
    phi, sd, i0 = biref_invert(a)
    np.testing.assert_allclose(phi.data, 20, atol=1e-9)
    with pytest.raises(ParameterError):
        generate_biref_stack(ones, 2 * ones, ones, angles)


def test_zero_stress_scene_is_uniform():
    z = np.zeros((4, 4))
    cube, truth = generate_odmr_scene([90, 65, 40, 15], 1.0, 0.01, HYPERFINE_14N_MHZ, FREQ,
                                      StressMaps(z, z, z, z))
    assert np.all(cube.data == cube.data[:, :1, :1])
    assert np.sum(cube.data[:, 0, 0] < 0.995) > 0
    assert truth.extra["pairing"] == ((0, 7), (1, 6), (2, 5), (3, 4))


def test_uniform_diag_stress_shifts_centers():
    z = np.zeros((2, 2))
    _, t0 = generate_odmr_scene([90, 65, 40, 15], 1.0, 0.01, HYPERFINE_14N_MHZ, FREQ, StressMaps(z, z, z, z))
    _, t1 = generate_odmr_scene([90, 65, 40, 15], 1.0, 0.01, HYPERFINE_14N_MHZ, FREQ,
                                StressMaps(z + 0.1, z, z, z), SpinStressConstants())
    np.testing.assert_allclose(t1.extra["centers"] - t0.extra["centers"], 0.486, atol=1e-12)


def test_scene_range_and_collision_checks():
    z = np.zeros((2, 2))
    with pytest.raises(DataError):
        generate_odmr_scene([150, 65, 40, 15], 1.0, 0.01, HYPERFINE_14N_MHZ, FREQ, StressMaps(z, z, z, z))
    with pytest.warns(RuntimeWarning):
        _, t = generate_odmr_scene([90, 88, 40, 15], 1.0, 0.01, HYPERFINE_14N_MHZ, FREQ,
                                   StressMaps(z, z, z, z))
    assert t.extra["collision"]


def test_stress_channel_geometry():
    s = stress_channel(64, 64, peak_gpa=0.05)
    assert s.diag.max() == pytest.approx(0.05, rel=0.05) and s.diag.min() < 0.005
    assert np.abs(s.xy).max() > 0
