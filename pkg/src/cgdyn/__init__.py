"""Effective (coarse-grained) dynamics of overdamped Langevin systems along a reaction coordinate."""

from .conditional import (
    CoefficientTable,
    ConditionalEstimate,
    GridSpec,
    build_coefficient_table,
    check_stationarity,
    conditional_expectation_mc,
    conditional_expectation_quadrature,
    interpolate,
    read_table,
    write_table,
)
from .errors import CgdynError, ConfigError, InsufficientSamplesError, NumericalError
from .integrate import coupled_run, em_step_freeenergy, em_step_full, em_step_reduced
from .model import ModelSpec, ReactionCoordinate, build
from .noise import NoiseStream

__version__ = "0.1.0"
