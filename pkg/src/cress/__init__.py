"""Multi-task speech/text translation with scheduled sampling, cross-modal
regularisation and gap-adaptive token weights, plus modality-gap diagnostics."""

from .autodiff import Tape, Tensor, no_grad
from .data import SynthTaskConfig, Triplet, Vocabulary, build_vocab, generate_synthetic_corpus, make_batches
from .model import ModelConfig, TranslationModel, init_parameters, load_checkpoint, save_checkpoint
from .training import TrainConfig, average_checkpoints, cress_loss, mtl_loss, train

__all__ = [
    "Tape", "Tensor", "no_grad",
    "SynthTaskConfig", "Triplet", "Vocabulary", "build_vocab", "generate_synthetic_corpus", "make_batches",
    "ModelConfig", "TranslationModel", "init_parameters", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "average_checkpoints", "cress_loss", "mtl_loss", "train",
]

__version__ = "0.1.0"
