"""Amortized Bayesian inference for dynamic linear models."""

from .conjugate import NormalGammaParams, exact_ng_transform, normal_gamma_posterior
from .dlm import DlmError, DlmSpec, DrawSet, ffbs, forward_filter, smoothing_marginal
from .flow import FlowError, FlowNetwork, flow_forward, flow_inverse
from .rng import Rng
from .trainer import BlockPlan, TrainConfig, adam_train, sample_posterior, train_blocked

__version__ = "0.1.0"
