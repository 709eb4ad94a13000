"""Desk-scale model zoo: classifier, causal LM, and denoising MLP."""

from .base import Module, TrainReport, TrainingDivergedError, freeze
from .classifier import ClassifierHyper, MlpClassifier, train_classifier
from .diffusion import (DiffusionHyper, DiffusionSchedule, EpsMlpDiffusion,
                        ddim_one_step_forward, sinusoidal_embedding, train_diffusion)
from .lm import LmHyper, TinyCausalLm, lm_token_stats, train_lm

__all__ = [
    "Module", "TrainReport", "TrainingDivergedError", "freeze",
    "ClassifierHyper", "MlpClassifier", "train_classifier",
    "DiffusionHyper", "DiffusionSchedule", "EpsMlpDiffusion",
    "ddim_one_step_forward", "sinusoidal_embedding", "train_diffusion",
    "LmHyper", "TinyCausalLm", "lm_token_stats", "train_lm",
]
