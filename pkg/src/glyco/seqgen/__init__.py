"""Transformer generative model of future glucose and insulin given a patient's history.

Three stochasticity modes share one architecture:

* ``parametric``: deterministic history encoding, Gaussian outcomes and
  Poisson treatments per future cell;
* ``latent``: a per-step Gaussian latent with a learned posterior, trained
  on the evidence lower bound;
* ``autoregressive``: one-step-ahead prediction trained with teacher forcing
  and sampled by rolling generated values back into the history.
"""

from .batching import Batch, PreparedGrid, ar_batch, prepare_grid, window_batch
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ALL_CHANNELS, MODES, ModelConfig
from .model import ModeError, ModelParams, UntrainedModelError, init_model
from .objectives import (EmptyMaskWarning, OutcomeDist, TreatmentDist, ar_step_losses, kl_to_prior,
                         loglik_outcome, loglik_treatment, objective, objective_L1, objective_L2,
                         objective_L3)
from .sampling import (Conditioner, GaussianPosterior, decode_outcome, decode_treatment, encode,
                       most_probable_treatment, poisson_mode, predict_windows, sample_latent,
                       sample_outcomes, sample_treatments)
from .training import TrainingDivergedError, TrainResult, evaluate_loss, train

__all__ = [
    "ALL_CHANNELS", "MODES", "Batch", "CheckpointError", "Conditioner", "EmptyMaskWarning",
    "GaussianPosterior", "ModeError", "ModelConfig", "ModelParams", "OutcomeDist", "PreparedGrid",
    "TrainResult", "TrainingDivergedError", "TreatmentDist", "UntrainedModelError", "ar_batch",
    "ar_step_losses", "decode_outcome", "decode_treatment", "encode", "evaluate_loss", "init_model",
    "kl_to_prior", "load_checkpoint", "loglik_outcome", "loglik_treatment", "most_probable_treatment",
    "objective", "objective_L1", "objective_L2", "objective_L3", "poisson_mode", "predict_windows",
    "prepare_grid", "sample_latent", "sample_outcomes", "sample_treatments", "save_checkpoint",
    "train", "window_batch",
]
