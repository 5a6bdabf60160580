"""Generative audio-text-style retrieval with a diffusion model over relevance distributions."""

from .datagen import SyntheticSpec, generate_synthetic, load_embeddings, save_embeddings
from .diffusion import generate, make_schedule
from .encoders import Embedding, contrastive_loss, cosine_similarity, encode
from .errors import (ConfigError, ContractError, DiffRetError, FormatError, IOFailure, LookupFailure,
                     NumericError, TruncatedError, VersionError)
from .experiments import ExperimentConfig, ablate
from .retrieval import EvalReport, evaluate, export_trajectory, recall_at_k, score
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "SyntheticSpec", "generate_synthetic", "load_embeddings", "save_embeddings", "generate", "make_schedule",
    "Embedding", "contrastive_loss", "cosine_similarity", "encode", "ConfigError", "ContractError",
    "DiffRetError", "FormatError", "IOFailure", "LookupFailure", "NumericError", "TruncatedError",
    "VersionError", "ExperimentConfig", "ablate", "EvalReport", "evaluate", "export_trajectory", "recall_at_k", "score", "Checkpoint",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
