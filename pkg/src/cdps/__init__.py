"""Diffusion posterior sampling with calibrated denoiser-error covariance for
geostatistical inverse problems."""

__version__ = "0.1.0"

from .denoiser import CalibrationTable, DenoiserNet, calibrate, read_net, train, write_net
from .forward import MaskOperator, NoiseModel, SeismicOperator, well_mask
from .grid import GridModel, NormStats, read_grid, write_grid
from .priors import GaussianPrior, GmmPrior, linear_gaussian_posterior
from .samplers import LikelihoodTerm, SamplerConfig, run_sampler
from .schedule import DdpmSchedule, EdmSchedule

__all__ = [
    "CalibrationTable", "DenoiserNet", "DdpmSchedule", "EdmSchedule", "GaussianPrior", "GmmPrior",
    "GridModel", "LikelihoodTerm", "MaskOperator", "NoiseModel", "NormStats", "SamplerConfig",
    "SeismicOperator", "calibrate", "linear_gaussian_posterior", "read_grid", "read_net",
    "run_sampler", "train", "well_mask", "write_grid", "write_net",
]
