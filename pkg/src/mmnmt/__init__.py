"""Multimodal attentive NMT: conditional GRU decoder with shared text/image attention."""

from .data import BOS, EOS, PAD, UNK, Vocabulary, build_vocab, filter_pairs, normalize_tokenize
from .model import Dims, ModelParams, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, init_params, nll_loss, train_loop
from .generator import beam_search, greedy_decode, multi_source_select
from .metrics import corpus_bleu

__version__ = "0.1.0"

__all__ = [
    "BOS", "EOS", "PAD", "UNK", "Vocabulary", "build_vocab", "filter_pairs", "normalize_tokenize",
    "Dims", "ModelParams", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "init_params", "nll_loss", "train_loop",
    "beam_search", "greedy_decode", "multi_source_select", "corpus_bleu",
]
