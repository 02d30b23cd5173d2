"""Joint transcription/translation decoding with dual-path agreement training."""

from .data import Corpus, TripletExample, Vocabulary, gen_corpus
from .decoding import DecodeRequest, beam_search, decode, decode_asr, decode_full, decode_st
from .metrics import agreement_report, bleu, corpus_wer, wer
from .nn import ModelConfig, Seq2SeqModel, preset
from .objective import build_dual_layouts, nll_loss, tda_objective, token_kl
from .trainer import TrainConfig, average_checkpoints, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "DecodeRequest",
    "ModelConfig",
    "Seq2SeqModel",
    "TrainConfig",
    "TripletExample",
    "Vocabulary",
    "agreement_report",
    "average_checkpoints",
    "beam_search",
    "bleu",
    "build_dual_layouts",
    "corpus_wer",
    "decode",
    "decode_asr",
    "decode_full",
    "decode_st",
    "gen_corpus",
    "load_checkpoint",
    "nll_loss",
    "preset",
    "save_checkpoint",
    "tda_objective",
    "token_kl",
    "train",
    "wer",
]
