"""
Numerical core of usp-ebm
"""

from .distributions import (
    BoxDomain,
    DensityGrid,
    GaussianMixture,
    Proposal,
    quadrature_normalize,
)
from .energy import EnergyModel, GridEnergy, MlpEnergy, ParamVector, QuadraticEnergy
from .estimate import (
    TrainResult,
    TrainTrace,
    WeightVector,
    mle_gradient,
    snis_weights,
    train,
)
from .evaluation import ScoreSet, aupr, fpr_at_tpr, mode_mass, shell_concentration
from .sampler import ChainBatch, ReplayBuffer, lmc_step, run_srlmc
from .usp import ParticleSet, psusp_round

__all__ = [
    "BoxDomain",
    "ChainBatch",
    "DensityGrid",
    "EnergyModel",
    "GaussianMixture",
    "GridEnergy",
    "MlpEnergy",
    "ParamVector",
    "ParticleSet",
    "Proposal",
    "QuadraticEnergy",
    "ReplayBuffer",
    "ScoreSet",
    "TrainResult",
    "TrainTrace",
    "WeightVector",
    "aupr",
    "fpr_at_tpr",
    "lmc_step",
    "mle_gradient",
    "mode_mass",
    "psusp_round",
    "quadrature_normalize",
    "run_srlmc",
    "shell_concentration",
    "snis_weights",
    "train",
]
