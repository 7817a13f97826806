"""Variational engine: grid, marginal fields, sweeps and rate posteriors."""

from .engine import (EngineSettings, InferenceResult, LoadStats, SupportError,
                     VariationalState, backward_sweep, check_slackness, evaluate_elbo,
                     expected_generator, expected_log_generator, forward_master,
                     initialize, pin_to_trajectory, queue_length_distribution,
                     run_coordinate_ascent, update_intensities, update_rate_posteriors)
from .grid import TimeGrid
from .posteriors import RatePosterior

__all__ = [
    "EngineSettings", "InferenceResult", "LoadStats", "RatePosterior", "SupportError",
    "TimeGrid", "VariationalState", "backward_sweep", "check_slackness", "evaluate_elbo",
    "expected_generator", "expected_log_generator", "forward_master", "initialize",
    "pin_to_trajectory", "queue_length_distribution", "run_coordinate_ascent",
    "update_intensities", "update_rate_posteriors",
]
