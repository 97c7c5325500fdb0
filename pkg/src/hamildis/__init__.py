"""Latent parameter discovery for Hamiltonian systems.

An encoder reads a noisy phase-space trajectory and returns a small latent
code; a decoder maps (q, p, code) to a time derivative, either as the
symplectic gradient of a learned energy (``consci``) or directly
(``baseline``).
"""
from .dynamics import generate_dataset, load_dataset, save_dataset
from .estimators import BaselineRegressor, ConSciNetRegressor, dataset_to_xy
from .nets import LatentDynamicsModel, checkpoint_load, checkpoint_save
from .training import TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "BaselineRegressor",
    "ConSciNetRegressor",
    "LatentDynamicsModel",
    "TrainingConfig",
    "checkpoint_load",
    "checkpoint_save",
    "dataset_to_xy",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "train",
]
