"""Adaptive importance sampling for tail probabilities and quantiles of Gaussian factor models."""

from .density import GaussianFamily, ReducedFamily, reduce
from .martingale import LILBand, LILReport, MartingalePath, MartingaleTrace, lil_check, lil_phi, variation_ratio
from .quantiles import (LevelUnreachableError, NormalizationSpec, QuantilePair, WeightedECDF, WeightedSample,
                        adaptive_mean, generalized_inverse, normalization_nu, quantile_estimate, quantile_pair,
                        tail_probability)
from .sa import (CompactCovering, GradientSpec, SAResult, SAState, StepSchedule, TruncationCounters,
                 bridged_gradient, hessian_estimate, run_chains, run_sa, sa_step, step_size, tail_gradient)

__version__ = "0.1.0"

__all__ = [
    "GaussianFamily", "ReducedFamily", "reduce",
    "LILBand", "LILReport", "MartingalePath", "MartingaleTrace", "lil_check", "lil_phi", "variation_ratio",
    "LevelUnreachableError", "NormalizationSpec", "QuantilePair", "WeightedECDF", "WeightedSample",
    "adaptive_mean", "generalized_inverse", "normalization_nu", "quantile_estimate", "quantile_pair",
    "tail_probability",
    "CompactCovering", "GradientSpec", "SAResult", "SAState", "StepSchedule", "TruncationCounters",
    "bridged_gradient", "hessian_estimate", "run_chains", "run_sa", "sa_step", "step_size", "tail_gradient",
]
