"""Cycle-consistent adversarial domain adaptation with joint (sample, label)
alignment, built on a small reverse-mode autodiff engine."""
from .autodiff import Tensor, Tape, backward, grad_check, no_grad
from .evaluate import Metrics, proxy_a_distance, target_accuracy
from .losses import LossBreakdown, confidence_weight
from .synthdata import DomainPair, GlyphStyle, gen_gaussian_pair, gen_glyph_pair
from .train import TrainConfig, TrainState, run_training, train_step

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "backward", "grad_check", "no_grad",
    "Metrics", "proxy_a_distance", "target_accuracy",
    "LossBreakdown", "confidence_weight",
    "DomainPair", "GlyphStyle", "gen_gaussian_pair", "gen_glyph_pair",
    "TrainConfig", "TrainState", "run_training", "train_step",
]
