import numpy as np
import pytest

from qdmkit.datacube import DataCube, SweepAxis
from qdmkit.errors import ModelMismatchError
from qdmkit.fitengine import FitOptions, fit_cube, fit_t1_two_stage
from qdmkit.models import ModelSpec
from qdmkit.synth import generate_cube, gradient_map

TAU = SweepAxis("time_ms", np.geomspace(0.01, 20, 60))


def t1_cube(eps, noise=0.0005, n=32, seed=2):
    truth = {"A": np.full((n, n), 0.05), "kappa": gradient_map(n, n, 0.25, 0.35)}
    return generate_cube(truth, ModelSpec("t1", stretch_exponent=eps), TAU, noise, seed)


def test_stage_one_finds_unit_exponent():
    cube, _ = t1_cube(1.0)
    res = fit_t1_two_stage(cube, FitOptions())
    assert 0.97 <= res.meta["stretch_exponent"] <= 1.03


def test_stage_one_finds_stretched_exponent():
    cube, truth = t1_cube(1.3)
    res = fit_t1_two_stage(cube, FitOptions())
    assert abs(res.meta["stretch_exponent"] - 1.3) <= 0.05
    assert res.spec.stretch_exponent == res.meta["stretch_exponent"]
    assert res.converged.mean() > 0.99


def test_stage_two_on_exact_exponent():
    # noiseless data with a uniform kappa: the mean trace fixes epsilon exactly
    n = 16
    truth = {"A": np.full((n, n), 0.05), "kappa": np.full((n, n), 0.3)}
    cube, _ = generate_cube(truth, ModelSpec("t1", stretch_exponent=1.3), TAU)
    res = fit_t1_two_stage(cube, FitOptions())
    assert res.meta["stretch_exponent"] == pytest.approx(1.3, rel=1e-8)
    np.testing.assert_allclose(res.param("kappa"), 0.3, rtol=1e-4)


def test_stage_two_kappa_with_known_exponent():
    cube, truth = t1_cube(1.3, noise=0.0)
    spec = ModelSpec("t1", stretch_exponent=1.3)
    res = fit_cube(cube, spec, np.stack([np.full((32, 32), 0.04), np.full((32, 32), 0.3)]))
    np.testing.assert_allclose(res.param("kappa"), truth.params["kappa"], rtol=1e-4)


def test_t1_needs_ms_sweep():
    bad = DataCube(SweepAxis("time_us", TAU.values), "contrast", np.ones((60, 4, 4)))
    with pytest.raises(ModelMismatchError):
        fit_t1_two_stage(bad)
