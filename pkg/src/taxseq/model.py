"""Full model bundle: taxonomy, vocabularies, encoder and decoder.

``ModelBundle`` owns everything needed to map raw text to a label set:
the label hierarchy, the symbolic label vocabulary and sequence layout,
the word vocabulary (trainable mode only), both parameter dictionaries,
and the configs that shaped them. Training, checkpointing, and inference
all operate on this one object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor
from .codec import Ordering, SymbolicVocab, build_vocab
from .decoder import DecoderConfig, decoder_forward, init_decoder_params
from .encoder import EncoderConfig, TextVocab, encode_tokens, init_encoder_params
from .errors import ConfigError
from .taxonomy import LabelHierarchy

__all__ = ["ModelBundle"]


@dataclass
class ModelBundle:
    hierarchy: LabelHierarchy
    vocab: SymbolicVocab
    text_vocab: TextVocab | None
    ordering: Ordering
    capacity: int
    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    enc_params: dict[str, Parameter]
    dec_params: dict[str, Parameter]

    @classmethod
    def build(
        cls,
        hierarchy: LabelHierarchy,
        ordering: Ordering,
        capacity: int,
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        seed: int = 0,
        text_vocab: TextVocab | None = None,
        label_init=None,
    ) -> "ModelBundle":
        """Initialize fresh parameters for the given taxonomy and layout."""
        vocab = build_vocab(hierarchy)
        dec_cfg.vocab_size = vocab.size
        if dec_cfg.max_positions < capacity:
            dec_cfg.max_positions = capacity
        if enc_cfg.mode == "trainable":
            if text_vocab is None:
                raise ConfigError("trainable encoder requires a text vocabulary")
            enc_cfg.vocab_size = text_vocab.size
        if enc_cfg.d_model != dec_cfg.d_model:
            raise ConfigError(
                f"encoder d_model {enc_cfg.d_model} != decoder d_model {dec_cfg.d_model}")
        rng = np.random.default_rng(seed)
        enc_params = init_encoder_params(enc_cfg, rng)
        dec_params = init_decoder_params(dec_cfg, rng, vocab=vocab, label_init=label_init)
        return cls(hierarchy, vocab, text_vocab, ordering, capacity,
                   enc_cfg, dec_cfg, enc_params, dec_params)

    def all_params(self) -> dict[str, Parameter]:
        out = {f"enc.{k}": v for k, v in self.enc_params.items()}
        out.update({f"dec.{k}": v for k, v in self.dec_params.items()})
        return out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.all_params().values())

    def encode_batch(self, text_ids, text_mask, train_mode=False, rng=None) -> Tensor:
        if self.enc_cfg.mode != "trainable":
            raise ConfigError("encode_batch needs a trainable encoder; "
                              "precomputed runs read states from the store")
        return encode_tokens(text_ids, text_mask, self.enc_cfg, self.enc_params,
                             train_mode, rng)

    def decoder_logits(self, label_ids, label_mask, enc_hidden, enc_mask,
                       train_mode=False, rng=None, capture_cross=None) -> Tensor:
        return decoder_forward(label_ids, label_mask, enc_hidden, enc_mask,
                               self.dec_cfg, self.dec_params, train_mode, rng,
                               capture_cross=capture_cross)
