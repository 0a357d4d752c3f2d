"""Emulator-based calibration of a stochastic bowel-cancer natural history model."""

from .design import InputRegion, PairMask, maximin_lhs, reduce_region, region_volume_fraction
from .emulator import LikelihoodEmulator
from .likelihood import (
    DiscrepancySpec,
    TargetData,
    beta_binomial_loglik,
    dirichlet_multinomial_loglik,
    group_bounds,
    total_loglik,
    variance_bounds,
)
from .sampler import (
    CalibrationConfig,
    ImportanceSample,
    mh_gibbs_sample,
    pivoted_cholesky,
    reweight,
    run_calibration,
)
from .simulator import NhmInputs, NhmSimulator, SimulatorOutput, simulate_cohort

__version__ = "0.1.0"

__all__ = [
    "InputRegion",
    "PairMask",
    "maximin_lhs",
    "reduce_region",
    "region_volume_fraction",
    "LikelihoodEmulator",
    "DiscrepancySpec",
    "TargetData",
    "beta_binomial_loglik",
    "dirichlet_multinomial_loglik",
    "group_bounds",
    "total_loglik",
    "variance_bounds",
    "CalibrationConfig",
    "ImportanceSample",
    "mh_gibbs_sample",
    "pivoted_cholesky",
    "reweight",
    "run_calibration",
    "NhmInputs",
    "NhmSimulator",
    "SimulatorOutput",
    "simulate_cohort",
]
