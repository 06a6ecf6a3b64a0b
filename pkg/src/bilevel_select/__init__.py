"""Bilevel data selection and online self-refinement for small autoregressive models."""
from .backbone import BackboneSpec, GenerationConfig, Params, forward, generate, greedy, init_params, loss_and_grad
from .bmo import train_bmo
from .config import ExperimentConfig, parse_config
from .data import Datasets
from .errors import (
    BilevelSelectError,
    InvalidConfigError,
    InvalidInputError,
    RatioOverflowError,
    ResourceLimitError,
    TrainingDivergedError,
)
from .estimators import BilevelDataSelector, DirectMixing, OnlineSelfRefiner, StochasticBMO
from .offline import TrainConfig, train_offline
from .online import OnlineConfig, train_online
from .sft import TokenSample, sft_loss, sft_loss_grad_z
from .theory import canonical_instance, gen_synthetic_instance
from .weights import WeightState

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "GenerationConfig",
    "Params",
    "forward",
    "generate",
    "greedy",
    "init_params",
    "loss_and_grad",
    "train_bmo",
    "ExperimentConfig",
    "parse_config",
    "Datasets",
    "BilevelSelectError",
    "InvalidConfigError",
    "InvalidInputError",
    "RatioOverflowError",
    "ResourceLimitError",
    "TrainingDivergedError",
    "BilevelDataSelector",
    "DirectMixing",
    "OnlineSelfRefiner",
    "StochasticBMO",
    "TrainConfig",
    "train_offline",
    "OnlineConfig",
    "train_online",
    "TokenSample",
    "sft_loss",
    "sft_loss_grad_z",
    "canonical_instance",
    "gen_synthetic_instance",
    "WeightState",
]
