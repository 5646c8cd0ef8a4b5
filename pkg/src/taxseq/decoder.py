"""Autoregressive label-sequence decoder.

Each layer runs masked self-attention over the label prefix, normalizes
the residual sum, then feeds that as the query of a cross-attention block
over the encoder states (keys and values), followed by a feedforward
sublayer. Normalization is applied after each residual sum and dropout is
applied to every sublayer output before it joins the residual stream. A
final linear projection produces logits over the label token vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .codec import SymbolicVocab
from .encoder import _ffn_init, _mha_init, _norm_init, _sub, expand_mask, trunc_normal
from .errors import ConfigError, InitDimensionMismatch, ShapeMismatch

__all__ = [
    "DecoderConfig", "init_decoder_params", "decoder_forward",
    "write_label_embeddings", "read_label_embeddings", "self_attention_mask",
]


@dataclass
class DecoderConfig:
    vocab_size: int = 0
    d_model: int = 128
    layers: int = 2
    heads: int = 8
    ff_dim: int = 0  # 0 means 4 * d_model
    dropout: float = 0.2
    max_positions: int = 64

    def __post_init__(self):
        if self.ff_dim == 0:
            self.ff_dim = 4 * self.d_model
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")


def write_label_embeddings(path, d_model: int, vectors: dict[str, np.ndarray]) -> None:
    """Write label vectors: one JSON header line, then raw float32 LE rows."""
    labels = list(vectors)
    header = {"d_model": d_model, "count": len(labels), "labels": labels}
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for name in labels:
            v = np.asarray(vectors[name], dtype="<f4")
            if v.shape != (d_model,):
                raise InitDimensionMismatch(
                    f"vector for {name!r} has shape {v.shape}, expected ({d_model},)")
            fh.write(v.tobytes())


def read_label_embeddings(path) -> tuple[int, dict[str, np.ndarray]]:
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        d = int(header["d_model"])
        labels = list(header["labels"])
        raw = np.frombuffer(fh.read(), dtype="<f4")
    if raw.size != d * len(labels):
        raise InitDimensionMismatch(
            f"{path}: expected {d * len(labels)} floats, found {raw.size}")
    rows = raw.reshape(len(labels), d)
    return d, {name: rows[i].copy() for i, name in enumerate(labels)}


def init_decoder_params(
    cfg: DecoderConfig,
    rng: np.random.Generator,
    vocab: SymbolicVocab | None = None,
    label_init: str | Path | None = None,
) -> dict[str, Parameter]:
    """Build the decoder parameter set.

    With ``label_init`` given, stored vectors seed both the input embedding
    rows and the output projection columns of the matching label tokens;
    all other entries keep their random draws.
    """
    d = cfg.d_model
    if cfg.vocab_size < 5:
        raise ConfigError("decoder vocab_size must cover specials plus labels")
    params: dict[str, Parameter] = {
        "word_embed": Parameter(trunc_normal(rng, (cfg.vocab_size, d)), name="word_embed"),
        "pos_embed": Parameter(trunc_normal(rng, (cfg.max_positions, d)), name="pos_embed"),
    }
    for i in range(cfg.layers):
        _mha_init(rng, d, f"l{i}.self", params)
        _norm_init(d, f"l{i}.norm_q", params)
        _mha_init(rng, d, f"l{i}.cross", params)
        _norm_init(d, f"l{i}.norm_c", params)
        _ffn_init(rng, d, cfg.ff_dim, f"l{i}.ff", params)
        _norm_init(d, f"l{i}.norm_f", params)
    params["out.w"] = Parameter(trunc_normal(rng, (d, cfg.vocab_size)), name="out.w")
    params["out.b"] = Parameter(np.zeros(cfg.vocab_size, dtype=np.float32), name="out.b")

    if label_init is not None:
        if vocab is None:
            raise ConfigError("label_init requires the symbolic vocabulary")
        file_d, vectors = read_label_embeddings(label_init)
        if file_d != d:
            raise InitDimensionMismatch(
                f"label vectors have d_model {file_d}, decoder uses {d}")
        for name, vec in vectors.items():
            tid = vocab.id_of(name)
            params["word_embed"].data[tid] = vec
            params["out.w"].data[:, tid] = vec
    return params


def self_attention_mask(label_mask: np.ndarray) -> np.ndarray:
    """Additive (B, 1, n, n) mask blocking future positions and pad keys."""
    label_mask = np.atleast_2d(np.asarray(label_mask))
    b, n = label_mask.shape
    causal = np.tril(np.ones((n, n), dtype=bool))
    allowed = causal[None, :, :] & (label_mask[:, None, :] != 0)
    return np.where(allowed, 0.0, ad.NEG_INF).astype(np.float32).reshape(b, 1, n, n)


def decoder_forward(
    label_ids: np.ndarray,
    label_mask: np.ndarray,
    enc_hidden,
    enc_mask: np.ndarray,
    cfg: DecoderConfig,
    params: dict[str, Parameter],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    capture_cross: list | None = None,
) -> Tensor:
    """Teacher-forced forward pass: (B, n) label ids -> (B, n, V) logits.

    ``enc_hidden`` may be a Tensor (joint training) or a plain array
    (precomputed states); ``enc_mask`` marks real encoder positions.
    """
    label_ids = np.atleast_2d(np.asarray(label_ids))
    label_mask = np.atleast_2d(np.asarray(label_mask))
    if label_ids.shape != label_mask.shape:
        raise ShapeMismatch(
            f"label ids {label_ids.shape} vs mask {label_mask.shape}")
    b, n = label_ids.shape
    if n > cfg.max_positions:
        raise ShapeMismatch(f"prefix length {n} exceeds max_positions {cfg.max_positions}")

    if not isinstance(enc_hidden, Tensor):
        enc_hidden = Tensor(np.asarray(enc_hidden, dtype=np.float32))
    if enc_hidden.data.ndim == 2:
        enc_hidden = ad.reshape(enc_hidden, (1,) + enc_hidden.data.shape)
    if enc_hidden.data.shape[-1] != cfg.d_model:
        raise InitDimensionMismatch(
            f"encoder width {enc_hidden.data.shape[-1]} != decoder d_model {cfg.d_model}")
    enc_mask = np.atleast_2d(np.asarray(enc_mask))
    if enc_mask.shape != enc_hidden.data.shape[:2]:
        raise ShapeMismatch(
            f"encoder mask {enc_mask.shape} vs hidden {enc_hidden.data.shape[:2]}")

    self_mask = self_attention_mask(label_mask)
    cross_mask = expand_mask(enc_mask).reshape(enc_mask.shape[0], 1, 1, enc_mask.shape[1])

    le = ad.add(ad.embed(params["word_embed"], label_ids),
                ad.embed(params["pos_embed"], np.arange(n)))
    le = ad.dropout(le, cfg.dropout, train_mode, rng)
    for i in range(cfg.layers):
        att = ad.multi_head_attention(le, le, le, self_mask, cfg.heads,
                                      _sub(params, f"l{i}.self"))
        q = ad.layer_norm(ad.add(att, le),
                          params[f"l{i}.norm_q.g"], params[f"l{i}.norm_q.b"])
        q = ad.dropout(q, cfg.dropout, train_mode, rng)
        cross = ad.multi_head_attention(q, enc_hidden, enc_hidden, cross_mask, cfg.heads,
                                        _sub(params, f"l{i}.cross"),
                                        capture=capture_cross)
        x = ad.layer_norm(ad.add(q, ad.dropout(cross, cfg.dropout, train_mode, rng)),
                          params[f"l{i}.norm_c.g"], params[f"l{i}.norm_c.b"])
        ff = ad.linear(ad.gelu(ad.linear(x, params[f"l{i}.ff.w1"], params[f"l{i}.ff.b1"])),
                       params[f"l{i}.ff.w2"], params[f"l{i}.ff.b2"])
        le = ad.layer_norm(ad.add(x, ad.dropout(ff, cfg.dropout, train_mode, rng)),
                           params[f"l{i}.norm_f.g"], params[f"l{i}.norm_f.b"])
    return ad.linear(le, params["out.w"], params["out.b"])
