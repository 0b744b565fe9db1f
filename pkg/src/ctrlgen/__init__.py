"""Attribute-controlled sentence generation with a VAE and attribute discriminators,
built on a small numpy reverse-mode autodiff engine."""

from .autodiff import Adam, Tensor, backward, gradient_check, no_grad
from .model import CtrlGenModel, ModelConfig
from .objectives import LossReport, LossWeights
from .text import GrammarSpec, Vocabulary, default_grammar, generate_synthetic_corpus, oracle_classify
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Adam", "Tensor", "backward", "gradient_check", "no_grad",
    "CtrlGenModel", "ModelConfig", "LossReport", "LossWeights",
    "GrammarSpec", "Vocabulary", "default_grammar", "generate_synthetic_corpus", "oracle_classify",
    "TrainConfig", "Trainer", "load_checkpoint", "save_checkpoint",
]
