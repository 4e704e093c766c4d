"""Minimal deterministic numpy neural-network kernel."""

from .layers import (conv2d_apply, conv2d_backward, dense_apply, dense_backward, lstm_sequence,
                     lstm_sequence_backward, lstm_step, lstm_step_backward)
from .models import MLP, ConvNet, LSTMRegressor
from .optim import AdamState, TrainConfig, adam_step, mse_loss
from .params import ParamStore, glorot_uniform, load_params, write_params
from .train import GradCheckReport, History, chronological_split, finite_difference_check, fit

__all__ = [
    "AdamState", "ConvNet", "GradCheckReport", "History", "LSTMRegressor", "MLP", "ParamStore",
    "TrainConfig", "adam_step", "chronological_split", "conv2d_apply", "conv2d_backward",
    "dense_apply", "dense_backward", "finite_difference_check", "fit", "glorot_uniform",
    "load_params", "lstm_sequence", "lstm_sequence_backward", "lstm_step", "lstm_step_backward",
    "mse_loss", "write_params",
]
