"""Indoor magnetic-field mapping with Gaussian-process regression.

Modules
-------
sim          synthetic dipole environments, survey trajectories and corrupted logs
ingest       flight-log parsing, median filtering, downsampling, world-frame rotation
calibration  nine-term magnetometer model and its two-step least-squares fit
gp           scalar GP regression with a squared-exponential kernel
mapping      intermediate, compromise and norm maps
evaluation   RMSE, 2-sigma capture, consistency, density sweep
cli          the ``magmap`` command
"""

__version__ = "0.1.0"

from magmap.calibration import CalibrationParams, calibrate, forward_model, inverse_model
from magmap.evaluation import compare_norm_maps, consistency_check, density_sweep, validate
from magmap.gp import GpComponent, Hyperparameters, OptimizerConfig, nlml, optimize_hyperparameters
from magmap.ingest import FlightLog, ObservationSet, merge_observations, preprocess
from magmap.mapping import (GridSpec, NormFieldMap, VectorFieldMap, build_compromise, build_intermediate,
                            build_norm_map, generate_grid, load_map, save_map)
from magmap.sim import CorruptionProfile, Environment, evaluate_field, load_environment, simulate_flight

__all__ = [
    "CalibrationParams", "calibrate", "forward_model", "inverse_model",
    "compare_norm_maps", "consistency_check", "density_sweep", "validate",
    "GpComponent", "Hyperparameters", "OptimizerConfig", "nlml", "optimize_hyperparameters",
    "FlightLog", "ObservationSet", "merge_observations", "preprocess",
    "GridSpec", "NormFieldMap", "VectorFieldMap", "build_compromise", "build_intermediate",
    "build_norm_map", "generate_grid", "load_map", "save_map",
    "CorruptionProfile", "Environment", "evaluate_field", "load_environment", "simulate_flight",
]
