"""Hierarchical text classification by autoregressive label-sequence decoding.

A taxonomy-aware codec turns label sets into symbolic token sequences
(children before parents, level groups separated), a transformer decoder
learns to emit those sequences from encoded text, and set-level F1 plus a
sequence error taxonomy measure the result. Everything runs on a small
reverse-mode autodiff tape over numpy; no deep-learning framework needed.
"""

from .autodiff import Parameter, Tensor, backward, no_grad
from .codec import (BOS_ID, EOS_ID, PAD_ID, SEP_ID, LabelSequence, Ordering,
                    SymbolicVocab, build_vocab, capacity_for, decode, encode)
from .corpus import Sample, SynthConfig, generate_synthetic, load_jsonl, load_splits
from .decoder import DecoderConfig, decoder_forward, init_decoder_params
from .encoder import (EncodedText, EncoderConfig, PrecomputedStates, TextVocab,
                      encode_tokens, tokenize_text)
from .errors import TaxseqError
from .inference import Prediction, beam_decode_ids, greedy_decode, predict_texts
from .loss import LossConfig, LossVariant, compute_loss
from .metrics import build_report, error_taxonomy, micro_macro_f1, write_report
from .model import ModelBundle
from .taxonomy import DatasetStats, LabelHierarchy, dataset_stats, load_hierarchy
from .trainer import (AdamW, TrainConfig, TrainResult, evaluate_epoch,
                      load_checkpoint, prepare_data, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "Parameter", "Tensor", "backward", "no_grad",
    "BOS_ID", "EOS_ID", "PAD_ID", "SEP_ID", "LabelSequence", "Ordering",
    "SymbolicVocab", "build_vocab", "capacity_for", "decode", "encode",
    "Sample", "SynthConfig", "generate_synthetic", "load_jsonl", "load_splits",
    "DecoderConfig", "decoder_forward", "init_decoder_params",
    "EncodedText", "EncoderConfig", "PrecomputedStates", "TextVocab",
    "encode_tokens", "tokenize_text",
    "TaxseqError",
    "Prediction", "beam_decode_ids", "greedy_decode", "predict_texts",
    "LossConfig", "LossVariant", "compute_loss",
    "build_report", "error_taxonomy", "micro_macro_f1", "write_report",
    "ModelBundle",
    "DatasetStats", "LabelHierarchy", "dataset_stats", "load_hierarchy",
    "AdamW", "TrainConfig", "TrainResult", "evaluate_epoch",
    "load_checkpoint", "prepare_data", "save_checkpoint", "train",
    "__version__",
]
