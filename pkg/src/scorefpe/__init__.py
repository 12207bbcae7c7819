"""Score-based diffusion on low-dimensional synthetic data, with residual
diagnostics of the score Fokker-Planck identity, residual-regularized and
residual-guided training, and probability-flow density evaluation."""

__version__ = "0.1.0"

from .flow import GridSpec, LikelihoodResult, OdeConfig, log_likelihood, prob_flow_ode, reverse_sde_sample
from .gmm import AnalyticScoreField, GmmSpec, default_gmm
from .net import NetConfig, ScoreNet, Tape, adam_step, input_jacobian, loss_backward, net_init
from .residual import ResidualConfig, ResidualReport, estimated_residual, exact_residual, r_dsm_like, r_fp
from .sde import KernelStats, SdeSpec
from .train import TrainConfig, TrainReport

__all__ = [
    "AnalyticScoreField",
    "GmmSpec",
    "GridSpec",
    "KernelStats",
    "LikelihoodResult",
    "NetConfig",
    "OdeConfig",
    "ResidualConfig",
    "ResidualReport",
    "ScoreNet",
    "SdeSpec",
    "Tape",
    "TrainConfig",
    "TrainReport",
    "adam_step",
    "default_gmm",
    "estimated_residual",
    "exact_residual",
    "input_jacobian",
    "log_likelihood",
    "loss_backward",
    "net_init",
    "prob_flow_ode",
    "r_dsm_like",
    "r_fp",
    "reverse_sde_sample",
]
