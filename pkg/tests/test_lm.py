import numpy as np
import pytest

from qdmkit.datacube import SweepAxis
from qdmkit.errors import DataError, ModelMismatchError, ParameterError
from qdmkit.fitengine import BOUNDS_STUCK, CONVERGED, FitOptions, lm_fit
from qdmkit.models import ModelSpec, eval_hahn, evaluate

TAU = SweepAxis("time_us", np.linspace(0, 10, 60))


def test_hahn_recovery():
    y = eval_hahn(TAU.values, 0.1, 0.5)
    out = lm_fit((TAU, y), ModelSpec("hahn"), [0.08, 0.6])
    assert out.converged and out.failure_reason is None
    np.testing.assert_allclose(out.params, [0.1, 0.5], rtol=1e-6)


def test_exact_seed_converges_immediately():
    spec = ModelSpec("rabi")
    p = np.array([0.04, 1.1, 0.3])
    out = lm_fit((TAU, evaluate(spec, p, TAU)), spec, p)
    assert out.converged and out.iterations <= 2
    assert out.chisq < 1e-28


def test_zero_series_rabi_is_bounded():
    spec = ModelSpec("rabi")
    out = lm_fit((TAU, np.zeros(60)), spec, [0.5, 1.0, 0.5])
    assert out.converged or out.failure_reason == "bounds_stuck"
    assert np.all(np.isfinite(out.params))
    lo, hi = spec.default_bounds()
    assert np.all(out.params >= lo) and np.all(out.params <= hi)


def test_accepted_steps_never_increase_chisq():
    spec = ModelSpec("rabi")
    rng = np.random.default_rng(5)
    for _ in range(50):
        truth = np.array([rng.uniform(0.02, 0.08), rng.uniform(0.6, 2), rng.uniform(0.1, 1)])
        y = evaluate(spec, truth, TAU) + rng.normal(0, 0.003, 60)
        seed = truth * rng.uniform(0.85, 1.15, 3)
        out = lm_fit((TAU, y), spec, seed, return_trace=True)
        assert out.trace.size >= 1
        assert np.all(np.diff(out.trace) <= 0)


def test_bounds_stuck_reported():
    # data want a negative decay amplitude; A is bounded below by zero
    y = -eval_hahn(TAU.values, 0.1, 0.5)
    out = lm_fit((TAU, y), ModelSpec("hahn"), [0.05, 0.5])
    assert out.failure_reason == "bounds_stuck" and not out.converged
    assert out.params[0] == 0.0


def test_max_iterations_reported():
    spec = ModelSpec("rabi")
    y = evaluate(spec, [0.05, 1.0, 0.2], TAU)
    out = lm_fit((TAU, y), spec, [0.01, 1.9, 2.0], FitOptions(max_iterations=1))
    assert not out.converged and out.failure_reason == "max_iter"


def test_custom_bounds_respected():
    y = eval_hahn(TAU.values, 0.1, 0.5)
    opts = FitOptions(bounds={"kappa": (0.0, 0.3)})
    out = lm_fit((TAU, y), ModelSpec("hahn"), [0.08, 0.2], opts)
    assert out.params[1] <= 0.3


def test_input_validation():
    spec = ModelSpec("hahn")
    y = eval_hahn(TAU.values, 0.1, 0.5)
    bad = y.copy()
    bad[3] = np.nan
    with pytest.raises(DataError):
        lm_fit((TAU, bad), spec, [0.1, 0.5])
    with pytest.raises(DataError):
        lm_fit((TAU, y[:-1]), spec, [0.1, 0.5])
    with pytest.raises(ParameterError):
        lm_fit((TAU, y), spec, [0.1])
    with pytest.raises(ParameterError):
        lm_fit((TAU, y), spec, [-0.1, 0.5])
    with pytest.raises(ModelMismatchError):
        lm_fit((SweepAxis("time_ms", TAU.values), y), spec, [0.1, 0.5])
    with pytest.raises(ParameterError):
        FitOptions(workers=0)


def test_status_codes_distinct():
    assert CONVERGED == 0 and BOUNDS_STUCK != CONVERGED
