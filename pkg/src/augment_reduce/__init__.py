"""Augment-and-reduce variational EM for linear classifiers with many classes."""

from .bounds import (
    exact_marginal_quadrature,
    exact_softmax_logprob,
    ove_bound,
    softmax_elbo,
    softmax_eta_star,
    softmax_eta_tilde,
)
from .data import Dataset, load, load_libsvm, load_xmlc, synth_categorical, synth_linear
from .evaluation import accuracy, prob_estimation_error, test_loglik, test_loglik_is, test_loglik_softmax
from .exact import train_exact
from .model import DivergenceError, LinearModel
from .noise import LocScale, NoiseKind
from .schedule import StepState, alpha_schedule, global_step_size
from .vem import METHODS, TrainConfig, Trainer, TrainResult, full_bound, train

__version__ = "0.1.0"

__all__ = [
    "METHODS", "Dataset", "DivergenceError", "LinearModel", "LocScale", "NoiseKind", "StepState",
    "TrainConfig", "TrainResult", "Trainer", "accuracy", "alpha_schedule", "exact_marginal_quadrature",
    "exact_softmax_logprob", "full_bound", "global_step_size", "load", "load_libsvm", "load_xmlc",
    "ove_bound", "prob_estimation_error", "softmax_elbo", "softmax_eta_star", "softmax_eta_tilde",
    "synth_categorical", "synth_linear", "test_loglik", "test_loglik_is", "test_loglik_softmax",
    "train", "train_exact",
]
