"""Dual-encoder image-text retrieval with a fusion token bridging vision and scene text."""

from .encoders import ModelConfig, OcrToken, Vocab
from .model import Model, init_model, load_checkpoint, save_checkpoint
from .data import CorpusSpec, PRESETS, generate_corpus, load_corpus, write_corpus
from .objective import fit, total_loss
from .retrieval import evaluate, embed_corpus

__all__ = [
    "ModelConfig", "OcrToken", "Vocab", "Model", "init_model", "load_checkpoint", "save_checkpoint",
    "CorpusSpec", "PRESETS", "generate_corpus", "load_corpus", "write_corpus", "fit", "total_loss",
    "evaluate", "embed_corpus",
]
