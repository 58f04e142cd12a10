"""Versioned JSON parameter dumps with shape headers.

All three trainable modules share one envelope: a format version, the
writing tool's version, a module tag, module metadata, and named flat
arrays with their shapes. Loading validates every declared shape. The
generator checkpoint embeds its vocabulary (tokens + hash); loading
against a different vocabulary is refused with both hashes in the
message.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np

from .autodiff import LstmParams, Tensor
from .corpus import RESERVED_TOKENS, Vocabulary
from .lg import LgParams
from .losses import SentClfParams
from .pad import PadParams

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VocabularyMismatchError(CheckpointError):
    pass


def _encode_arrays(named: dict[str, Tensor]) -> dict[str, Any]:
    return {
        name: {"shape": list(t.data.shape), "data": [float(v) for v in t.data.reshape(-1)]}
        for name, t in named.items()
    }


def _write(path: str, module: str, meta: dict[str, Any], arrays: dict[str, Any]) -> None:
    from . import __version__
    payload = {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "module": module,
        "meta": meta,
        "arrays": arrays,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def _read(path: str, expect_module: str) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version!r}")
    module = payload.get("module")
    if module != expect_module:
        raise CheckpointError(f"{path}: module {module!r}, expected {expect_module!r}")
    return payload


def _decode_array(path: str, name: str, arrays: dict[str, Any],
                  expect_shape: tuple[int, ...] | None = None) -> np.ndarray:
    if name not in arrays:
        raise CheckpointError(f"{path}: missing array {name!r}")
    entry = arrays[name]
    shape = tuple(entry["shape"])
    data = np.asarray(entry["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise CheckpointError(
            f"{path}: array {name!r} has {data.size} values for shape {shape}")
    if expect_shape is not None and shape != expect_shape:
        raise CheckpointError(
            f"{path}: array {name!r} has shape {shape}, expected {expect_shape}")
    return data.reshape(shape)


# ---------------------------------------------------------------------------
# PAD head

def save_pad(path: str, params: PadParams) -> None:
    meta = {
        "feature_dim": params.feature_dim,
        "hidden_size": params.hidden_size,
        "n_categories": params.w2.shape[1],
        "frozen": params.frozen,
    }
    _write(path, "pad", meta, _encode_arrays(params.as_dict()))


def load_pad(path: str) -> PadParams:
    payload = _read(path, "pad")
    meta = payload["meta"]
    arrays = payload["arrays"]
    d, h, k = meta["feature_dim"], meta["hidden_size"], meta["n_categories"]
    params = PadParams(
        w1=Tensor(_decode_array(path, "w1", arrays, (d, h))),
        b1=Tensor(_decode_array(path, "b1", arrays, (h,))),
        w2=Tensor(_decode_array(path, "w2", arrays, (h, k))),
        b2=Tensor(_decode_array(path, "b2", arrays, (k,))),
    )
    if meta.get("frozen"):
        params.freeze()
    return params


# ---------------------------------------------------------------------------
# explanation generator

def _vocab_from_meta(path: str, meta: dict[str, Any]) -> Vocabulary:
    tokens = meta.get("vocab_tokens")
    if not isinstance(tokens, list) or tokens[:len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
        raise CheckpointError(f"{path}: malformed embedded vocabulary")
    vocab = Vocabulary(tokens[len(RESERVED_TOKENS):])
    if vocab.sha256 != meta.get("vocab_hash"):
        raise CheckpointError(f"{path}: embedded vocabulary hash does not match its tokens")
    return vocab


def save_lg(path: str, params: LgParams, vocab: Vocabulary, mode: str) -> None:
    if len(vocab) != params.vocab_size:
        raise CheckpointError(
            f"vocabulary size {len(vocab)} != embedding rows {params.vocab_size}")
    meta = {
        "mode": mode,
        "cond_dim": params.cond_dim,
        "embed_size": params.embed.shape[1],
        "hidden_size": params.hidden_size,
        "vocab_hash": vocab.sha256,
        "vocab_tokens": list(vocab.tokens),
    }
    _write(path, "lg", meta, _encode_arrays(params.as_dict()))


def load_lg(path: str, expected_vocab_hash: str | None = None
            ) -> tuple[LgParams, Vocabulary, dict[str, Any]]:
    payload = _read(path, "lg")
    meta = payload["meta"]
    vocab = _vocab_from_meta(path, meta)
    if expected_vocab_hash is not None and expected_vocab_hash != meta["vocab_hash"]:
        raise VocabularyMismatchError(
            f"{path}: vocabulary hash mismatch: checkpoint {meta['vocab_hash']} "
            f"vs dataset {expected_vocab_hash}")
    arrays = payload["arrays"]
    v, e, h, dc = len(vocab), meta["embed_size"], meta["hidden_size"], meta["cond_dim"]
    params = LgParams(
        embed=Tensor(_decode_array(path, "embed", arrays, (v, e))),
        cond_w=Tensor(_decode_array(path, "cond_w", arrays, (dc, 4 * h))),
        cond_b=Tensor(_decode_array(path, "cond_b", arrays, (4 * h,))),
        lstm1=LstmParams(
            w_x=Tensor(_decode_array(path, "lstm1_wx", arrays, (e, 4 * h))),
            w_h=Tensor(_decode_array(path, "lstm1_wh", arrays, (h, 4 * h))),
            b=Tensor(_decode_array(path, "lstm1_b", arrays, (4 * h,))),
        ),
        lstm2=LstmParams(
            w_x=Tensor(_decode_array(path, "lstm2_wx", arrays, (h, 4 * h))),
            w_h=Tensor(_decode_array(path, "lstm2_wh", arrays, (h, 4 * h))),
            b=Tensor(_decode_array(path, "lstm2_b", arrays, (4 * h,))),
        ),
        out_w=Tensor(_decode_array(path, "out_w", arrays, (h, v))),
        out_b=Tensor(_decode_array(path, "out_b", arrays, (v,))),
    )
    return params, vocab, meta


# ---------------------------------------------------------------------------
# sentence classifier

def save_sentence_classifier(path: str, params: SentClfParams, vocab: Vocabulary) -> None:
    if len(vocab) != params.embed.shape[0]:
        raise CheckpointError(
            f"vocabulary size {len(vocab)} != embedding rows {params.embed.shape[0]}")
    meta = {
        "embed_size": params.embed.shape[1],
        "n_categories": params.w.shape[1],
        "frozen": params.frozen,
        "vocab_hash": vocab.sha256,
        "vocab_tokens": list(vocab.tokens),
    }
    _write(path, "sentence_classifier", meta, _encode_arrays(params.as_dict()))


def load_sentence_classifier(path: str, expected_vocab_hash: str | None = None
                             ) -> tuple[SentClfParams, Vocabulary]:
    payload = _read(path, "sentence_classifier")
    meta = payload["meta"]
    vocab = _vocab_from_meta(path, meta)
    if expected_vocab_hash is not None and expected_vocab_hash != meta["vocab_hash"]:
        raise VocabularyMismatchError(
            f"{path}: vocabulary hash mismatch: checkpoint {meta['vocab_hash']} "
            f"vs dataset {expected_vocab_hash}")
    arrays = payload["arrays"]
    v, e, k = len(vocab), meta["embed_size"], meta["n_categories"]
    params = SentClfParams(
        embed=Tensor(_decode_array(path, "embed", arrays, (v, e))),
        w=Tensor(_decode_array(path, "w", arrays, (e, k))),
        b=Tensor(_decode_array(path, "b", arrays, (k,))),
    )
    if meta.get("frozen"):
        params.freeze()
    return params, vocab
