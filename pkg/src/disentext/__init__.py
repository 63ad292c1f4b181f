"""Sentence VAE whose latent code passes through an invertible flow so one
coordinate tracks sentiment and can be set directly."""
from .config import ExperimentConfig, profile
from .corpus import LabeledCorpus, LabeledSentence, Vocabulary, build_vocab, generate_synthetic, load_corpus
from .model import DisentangledVAE, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainingConfig, build_model, train

__version__ = "0.1.0"

__all__ = [
    "DisentangledVAE", "ExperimentConfig", "LabeledCorpus", "LabeledSentence", "ModelConfig",
    "TrainingConfig", "Vocabulary", "build_model", "build_vocab", "generate_synthetic", "load_checkpoint",
    "load_corpus", "profile", "save_checkpoint", "train",
]
