"""Time-aware MIMO channel prediction: simulation, estimation, an all-linear
encoder predictor, training and evaluation."""

from .channel import (ChannelSequence, EstimationConfig, NumericalError, PathSet, SimConfig,
                      add_awgn, autocorrelation_estimate, bessel_j0, generate_sequence,
                      ls_estimate, mmse_estimate, sample_covariance, sample_path_set, simulate,
                      steering_vector)
from .model import ModelConfig, count_mults, count_params, forward, init_params, permute_weights
from .training import Predictor, TrainConfig, WindowDataset, fine_tune, train

__version__ = "0.1.0"
