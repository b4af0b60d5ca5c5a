"""Levenberg-Marquardt engine, seeding and batch drivers."""

from .batch import FitResultCube, fit_cube, fit_t1_two_stage
from .lm import (BOUNDS_STUCK, CONVERGED, MAX_ITER, SINGULAR, SKIPPED, STATUS_NAMES,
                 FitOptions, FitOutcome, lm_fit)
from .odmr import OdmrWindow, find_odmr_peaks, fit_odmr_cube
from .seeding import SeedGrid, initial_guess, multistart_fit, seed_by_dicing

__all__ = [
    "BOUNDS_STUCK", "CONVERGED", "MAX_ITER", "SINGULAR", "SKIPPED", "STATUS_NAMES",
    "FitOptions", "FitOutcome", "FitResultCube", "OdmrWindow", "SeedGrid",
    "find_odmr_peaks", "fit_cube", "fit_odmr_cube", "fit_t1_two_stage",
    "initial_guess", "lm_fit", "multistart_fit", "seed_by_dicing",
]
