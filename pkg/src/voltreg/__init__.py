"""Local reactive-power control of radial distribution feeders on a linearized grid model."""

from .errors import NumericError, ValidationError, VoltregError
from .feeder import Feeder, load_feeder, parse_feeder
from .lindistflow import GridMatrices, build_model

__all__ = ["Feeder", "GridMatrices", "NumericError", "ValidationError", "VoltregError",
           "build_model", "load_feeder", "parse_feeder"]
__version__ = "0.1.0"
