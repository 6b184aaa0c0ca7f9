"""Bouncy hybrid samplers: exact-flow PDMP MCMC for Gaussian and truncated Gaussian targets."""

from .model import ConstraintSet, GaussianTarget, GuideField, State, TargetModel
from .samplers import (
    SamplerConfig,
    Skeleton,
    bouncy_particle,
    randomized_hmc,
    run_bhs,
    run_cbhs,
    run_gibbs_truncated_mvn,
    run_qbhs,
)

__version__ = "0.1.0"

__all__ = [
    "ConstraintSet",
    "GaussianTarget",
    "GuideField",
    "SamplerConfig",
    "Skeleton",
    "State",
    "TargetModel",
    "bouncy_particle",
    "randomized_hmc",
    "run_bhs",
    "run_cbhs",
    "run_gibbs_truncated_mvn",
    "run_qbhs",
]
