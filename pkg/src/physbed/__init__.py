"""Bed topography as a physics-regularized residual over a prior bed."""

__version__ = "0.1.0"

from .data import (ObservationConfig, ObservationLayer, NormStats, RadarPicks, Scene, SynthParams,
                   build_observations, residual_norm_stats, synth_scene)
from .errors import (DimensionError, EmptyObservationsError, InsufficientDataError,
                     NonFiniteLossError, ParameterError, ParseError, PhysbedError)
from .grid import DihedralElement, GridGeometry, RasterGrid, VectorField
from .physics import LossConfig, Schedule, total_loss
from .solve import ReconState, SolverConfig, TileConfig, reconstruct, solve_tiled, solve_variational
