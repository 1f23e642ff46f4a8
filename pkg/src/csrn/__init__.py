"""CSRN: a lightweight learned compressed-sensing image codec."""

from .model import Csrn, CsrnConfig, MeasurementSet, count_params
from .tensor import ConvSpec, Tape, Tensor

__all__ = [
    "Csrn",
    "CsrnConfig",
    "MeasurementSet",
    "count_params",
    "ConvSpec",
    "Tape",
    "Tensor",
]

__version__ = "0.1.0"
