"""Correlation-aware disentangled VAE: four-way latent codes, conditional
mutual information and relevance losses, fairness metrics and latent editing."""

from .autodiff import ParamSet, Tensor, backward, stop_gradient
from .data import BiasSpec, LabeledDataset, generate_colored_digits, generate_unbiased_test, load_dataset, save_dataset
from .kernels import BACKEND
from .latent import GaussianPosterior, LatentLayout, LatentPartition
from .networks import CadVae, ModelSpec
from .trainer import TrainConfig, TrainState, fit, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BiasSpec",
    "CadVae",
    "GaussianPosterior",
    "LabeledDataset",
    "LatentLayout",
    "LatentPartition",
    "ModelSpec",
    "ParamSet",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "backward",
    "fit",
    "generate_colored_digits",
    "generate_unbiased_test",
    "load_checkpoint",
    "load_dataset",
    "save_checkpoint",
    "save_dataset",
    "stop_gradient",
    "train_step",
]
