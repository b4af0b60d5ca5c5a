import numpy as np
import pytest

from qdmkit.datacube import DataCube, SweepAxis
from qdmkit.errors import FitError, ParameterError
from qdmkit.fitengine import FitOptions, initial_guess, seed_by_dicing
from qdmkit.fitengine.seeding import block_edges, dominant_frequency
from qdmkit.models import ModelSpec, evaluate
from qdmkit.synth import generate_cube, gradient_map

TAU = SweepAxis("time_us", np.linspace(0, 3, 60))


def test_block_edges_cover_axis():
    e = block_edges(1000, 10)
    assert e[0] == 0 and e[-1] == 1000 and np.all(np.diff(e) == 100)
    e = block_edges(7, 3)
    assert list(e) == [0, 2, 4, 7]


def test_dominant_frequency():
    t = np.linspace(0, 3, 60)
    z = np.cos(2 * np.pi * 1.37 * t)
    assert dominant_frequency(t, z) == pytest.approx(1.37, rel=0.02)


@pytest.mark.parametrize("kind, truth", [
    ("rabi", [0.04, 1.1, 0.4]),
    ("hahn", [0.1, 0.3]),
    ("ramsey", [0.1, 0.12, 0.08, 0.7]),
])
def test_initial_guess_lands_near_truth(kind, truth):
    spec = ModelSpec(kind)
    sweep = SweepAxis("time_us", np.linspace(0, 3 if kind != "hahn" else 15, 80))
    y = evaluate(spec, truth, sweep)
    g = initial_guess(spec, sweep.values, y)
    np.testing.assert_allclose(g, truth, rtol=0.25)


def test_t1_guess():
    spec = ModelSpec("t1")
    sweep = SweepAxis("time_ms", np.linspace(0.01, 10, 60))
    g = initial_guess(spec, sweep.values, evaluate(spec, [0.05, 0.3], sweep))
    np.testing.assert_allclose(g, [0.05, 0.3], rtol=0.05)


def test_odmr_guess_respects_center_bounds():
    spec = ModelSpec("odmr_triplet")
    f = SweepAxis("frequency_MHz", np.linspace(2860, 2880, 161))
    y = evaluate(spec, [0.01, 2871.3, 0.8], f)
    g = initial_guess(spec, f.values, y, FitOptions(bounds={"f_center": (2865.0, 2875.0)}))
    assert abs(g[1] - 2871.3) < 0.2


def _rabi_cube(n, noise=0.0, seed=3):
    truth = {"A": np.full((n, n), 0.04), "f": gradient_map(n, n, 0.8, 1.2), "kappa": np.full((n, n), 0.5)}
    return generate_cube(truth, ModelSpec("rabi"), TAU, noise, seed)


def test_single_block_gives_global_seed():
    cube, _ = _rabi_cube(16)
    grid = seed_by_dicing(cube, ModelSpec("rabi"), 1)
    seeds = grid.pixel_seeds()
    assert seeds.shape == (16, 16, 3)
    assert np.all(seeds == grid.params[0, 0])


def test_hundred_blocks_on_large_image():
    truth = {"A": np.full((1000, 1000), 0.04), "f": np.full((1000, 1000), 1.0),
             "kappa": np.full((1000, 1000), 0.5)}
    cube, _ = generate_cube(truth, ModelSpec("rabi"), SweepAxis("time_us", np.linspace(0, 3, 12)))
    grid = seed_by_dicing(cube, ModelSpec("rabi"), 10)
    assert grid.params.shape == (10, 10, 3) and not grid.inherited.any()


def test_uniform_cube_gives_equal_block_seeds():
    n = 40
    truth = {"A": np.full((n, n), 0.04), "f": np.full((n, n), 1.0), "kappa": np.full((n, n), 0.5)}
    cube, _ = generate_cube(truth, ModelSpec("rabi"), TAU, 0.002, 9)
    grid = seed_by_dicing(cube, ModelSpec("rabi"), 8)
    spread = grid.params.reshape(-1, 3).std(axis=0) / grid.params.reshape(-1, 3).mean(axis=0)
    assert np.all(spread < 0.05)
    np.testing.assert_allclose(grid.params[..., 1], 1.0, rtol=0.02)


def test_block_mapping():
    cube, _ = _rabi_cube(20)
    grid = seed_by_dicing(cube, ModelSpec("rabi"), 3)
    assert grid.block_of(0, 0) == (0, 0)
    assert grid.block_of(19, 19) == (2, 2)
    assert grid.block_of(5, 6) == (1, 0)  # edges 0, 6, 13, 20


def test_dicing_bounds_and_total_failure():
    cube, _ = _rabi_cube(8)
    with pytest.raises(ParameterError):
        seed_by_dicing(cube, ModelSpec("rabi"), 11)
    flat = DataCube(TAU, "contrast", -np.ones((60, 4, 4)))
    with pytest.raises(FitError):
        seed_by_dicing(flat, ModelSpec("rabi"), 2, FitOptions(restarts=0))


def test_seeding_is_deterministic():
    cube, _ = _rabi_cube(16, noise=0.002)
    a = seed_by_dicing(cube, ModelSpec("rabi"), 4, FitOptions(seed=5))
    b = seed_by_dicing(cube, ModelSpec("rabi"), 4, FitOptions(seed=5))
    assert np.array_equal(a.params, b.params)
