"""Widefield NV-magnetometry data cubes, per-pixel fitting and stress imaging."""

__version__ = "0.1.0"

from .datacube import (DataCube, MapImage, RawStack, SweepAxis, contrast_reduce, crop,
                       pixel_series, visibility_reduce)
from .errors import (DataError, FitError, ModelMismatchError, ParameterError, PeakCountError,
                     QDCFormatError, QDMError, ReductionError)
from .models import ModelSpec, evaluate, jacobian
from .qdc import load_qdc, save_qdc

__all__ = [
    "__version__", "DataCube", "MapImage", "RawStack", "SweepAxis", "contrast_reduce", "crop",
    "pixel_series", "visibility_reduce", "DataError", "FitError", "ModelMismatchError",
    "ParameterError", "PeakCountError", "QDCFormatError", "QDMError", "ReductionError",
    "ModelSpec", "evaluate", "jacobian", "load_qdc", "save_qdc",
]
