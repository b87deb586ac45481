"""Latent virtual-memory agent: model-based RL for lane keeping.

A recurrent stochastic latent dynamics model is learned from image
observations; the driving policy and its twin critics are trained entirely on
imagined latent rollouts, and fresh data is collected with exploration noise.
"""

from .agent import Agent, lambda_return
from .config import (ConfigError, EnvConfig, ModelConfig, RunConfig, TrainerConfig,
                     desk_config, load_run_config, paper_shape_config)
from .imagination import ImaginedTrajectory, imagine
from .lane_sim import Action, LaneKeepingEnv, VehicleState
from .latent_model import GaussianDiag, LatentModel, LatentState, kl_divergence
from .replay import Episode, ReplayBuffer, SequenceBatch
from .trainer import EvalReport, Trainer

__version__ = "0.1.0"

__all__ = [
    "Action", "Agent", "ConfigError", "EnvConfig", "EvalReport", "Episode",
    "GaussianDiag", "ImaginedTrajectory", "LaneKeepingEnv", "LatentModel",
    "LatentState", "ModelConfig", "ReplayBuffer", "RunConfig", "SequenceBatch",
    "Trainer", "TrainerConfig", "VehicleState", "desk_config", "imagine",
    "kl_divergence", "lambda_return", "load_run_config", "paper_shape_config",
]
