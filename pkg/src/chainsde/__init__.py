"""Directed chain mean-field SDEs: simulation, law iteration, filtering of a
hidden neighbour, estimation of the dependence weight and numerical checks."""

__version__ = "0.1.0"

from .errors import ChainSDEError, ConfigError, PreconditionError
from .laws import LawFlow
from .measure import (
    EmpiricalMeasure,
    Mesh,
    gaussian_chain_oracle,
    kde,
    path_metric_Dt,
    w2_1d,
)
from .model import (
    ChainModel,
    ClosureSpec,
    InitialLaw,
    PairwiseDrift,
    TimeGrid,
    builtin_model,
    eval_mixture_drift,
)
from .simulate import (
    ChainEnsemble,
    default_law,
    flow_check,
    pathwise_sensitivity,
    picard_iterate,
    simulate_chain,
    simulate_loop,
)
from .filtering import cross_validate, kalman_bucy, particle_filter, spde_solve
from .estimate import MleInput, clt_diagnostic, convergence_table, mle_u
from .analysis import density_scaling_report, mrf_partial_correlation

__all__ = [
    "ChainEnsemble",
    "ChainModel",
    "ChainSDEError",
    "ClosureSpec",
    "ConfigError",
    "EmpiricalMeasure",
    "InitialLaw",
    "LawFlow",
    "Mesh",
    "MleInput",
    "PairwiseDrift",
    "PreconditionError",
    "TimeGrid",
    "builtin_model",
    "clt_diagnostic",
    "convergence_table",
    "cross_validate",
    "default_law",
    "density_scaling_report",
    "eval_mixture_drift",
    "flow_check",
    "gaussian_chain_oracle",
    "kalman_bucy",
    "kde",
    "mle_u",
    "mrf_partial_correlation",
    "particle_filter",
    "path_metric_Dt",
    "pathwise_sensitivity",
    "picard_iterate",
    "simulate_chain",
    "simulate_loop",
    "spde_solve",
    "w2_1d",
]
