"""Training losses for the explanation generator, and their helpers.

Four terms feed the combined objective:

* word-wise: summed cross-entropy of teacher-forced next-token logits;
* sentence-semantic: negative cosine between the mean-embedding of the
  reference and of the soft-decoded rollout;
* sentence-discriminative: cross-entropy of a frozen 9-way sentence
  classifier applied to the rollout (gradients flow into the generator
  through the probability rows, never into the classifier);
* PAD: summed cross-entropy of the detection head (report-only while
  the head is frozen).

The sentence classifier trained here owns an embedding table separate
from the generator's; its mean-pooled table is also the default
sentence embedder, so the semantic loss measures distances in a space
that carries category structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import PAD
from .lg import LgParams, soft_decode_batch
from .optim import Adam, clip_global_norm, lr_at
from .validation import ValidationError, check_fitted, check_token_ids

N_PA_CATEGORIES = 9
INIT_SCALE = 0.08


@dataclass
class LossWeights:
    omega1: float = 1.0      # PAD term (report-only once the head is frozen)
    omega2: float = 1.0      # explanation term
    lambda_ww: float = 1.0
    lambda_disc: float = 0.2
    lambda_ss: float = 0.5


def word_wise_loss(tape: Tape, logit_rows: Sequence[Tensor], reference: Sequence[int]) -> Tensor:
    """Sum over positions of -log softmax(logits_t)[reference_t]."""
    if len(logit_rows) != len(reference):
        raise ValidationError(
            f"{len(logit_rows)} logit rows vs {len(reference)} reference tokens")
    if not logit_rows:
        raise ValidationError("word_wise_loss needs at least one position")
    total = None
    for row, target in zip(logit_rows, reference):
        term = ad.softmax_xent(tape, row, int(target))
        total = term if total is None else ad.add(tape, total, term)
    return total


def sentence_semantic_loss(tape: Tape, reference_emb: Tensor, generated_emb: Tensor) -> Tensor:
    """Negative cosine similarity; degenerate embeddings score 0."""
    return ad.scale(tape, ad.cosine(tape, reference_emb, generated_emb), -1.0)


def total_loss(tape: Tape, weights: LossWeights, *, l_pad: Tensor | None = None,
               l_ww: Tensor | None = None, l_disc: Tensor | None = None,
               l_ss: Tensor | None = None) -> Tensor:
    """omega1*L_pad + omega2*(lambda_ww*L_ww + lambda_disc*L_disc + lambda_ss*L_ss)."""
    terms: list[Tensor] = []
    if l_pad is not None:
        terms.append(ad.scale(tape, l_pad, weights.omega1))
    inner: list[tuple[Tensor | None, float]] = [
        (l_ww, weights.lambda_ww), (l_disc, weights.lambda_disc), (l_ss, weights.lambda_ss)]
    for t, lam in inner:
        if t is not None:
            terms.append(ad.scale(tape, t, weights.omega2 * lam))
    if not terms:
        raise ValidationError("total_loss needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(tape, out, t)
    return out


# ---------------------------------------------------------------------------
# sentence embedding

class MeanEmbedder:
    """Mean of word-embedding rows; the default sentence embedder.

    Works on token ids (hard path) and on probability rows (soft path);
    the two agree exactly when the rows are one-hot.
    """

    def __init__(self, table: Tensor):
        self.table = table

    def embed_tokens(self, tape: Tape, ids: Sequence[int]) -> Tensor:
        ids = check_token_ids(ids, self.table.shape[0], name="sentence")
        if ids.size == 0:
            raise ValidationError("cannot embed an empty sentence")
        return ad.mean_axis0(tape, ad.embedding_lookup(tape, self.table, ids))

    def embed_tokens_batch(self, tape: Tape, padded: np.ndarray, mask: np.ndarray) -> Tensor:
        steps = [ad.embedding_lookup(tape, self.table, padded[:, t])
                 for t in range(padded.shape[1])]
        return ad.masked_step_mean(tape, steps, mask)

    def embed_soft_batch(self, tape: Tape, rows: Sequence[Tensor], mask: np.ndarray) -> Tensor:
        steps = [ad.matmul(tape, r, self.table) for r in rows]
        return ad.masked_step_mean(tape, steps, mask)


def embed_sentence(tape: Tape, ids: Sequence[int], embedder: MeanEmbedder) -> Tensor:
    return embedder.embed_tokens(tape, ids)


# ---------------------------------------------------------------------------
# sentence classifier (discriminator + embedder owner)

@dataclass
class SentClfParams:
    embed: Tensor   # (V, d)
    w: Tensor       # (d, 9)
    b: Tensor       # (9,)
    frozen: bool = False

    def as_dict(self) -> dict[str, Tensor]:
        return {"embed": self.embed, "w": self.w, "b": self.b}

    def freeze(self) -> None:
        self.frozen = True
        for t in self.as_dict().values():
            t.requires_grad = False

    def copy(self) -> "SentClfParams":
        return SentClfParams(
            embed=Tensor(self.embed.data.copy(), self.embed.requires_grad),
            w=Tensor(self.w.data.copy(), self.w.requires_grad),
            b=Tensor(self.b.data.copy(), self.b.requires_grad),
            frozen=self.frozen,
        )


def _pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    t_len = max(len(s) for s in sequences)
    padded = np.full((len(sequences), t_len), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), t_len))
    for i, s in enumerate(sequences):
        padded[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return padded, mask


class SentenceClassifier(BaseEstimator):
    """Mean-pooled bag-of-embeddings classifier over the 9 attack categories.

    Labels are attack categories 1..9. Trained with summed cross-entropy
    until validation accuracy plateaus; after freeze() it serves as both
    the discriminative loss and the sentence embedder for the semantic
    loss, receiving no gradient from either.
    """

    def __init__(self, embed_size: int = 128, learning_rate: float = 2e-4,
                 batch_size: int = 32, max_epochs: int = 120, patience: int = 10,
                 clip_norm: float = 5.0, lr_decay: float = 0.5,
                 lr_decay_every: int = 20, seed: int = 0):
        self.embed_size = embed_size
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.seed = seed

    @staticmethod
    def _check_labels(y, n: int, name: str) -> np.ndarray:
        arr = np.asarray(y, dtype=np.int64)
        if arr.shape != (n,):
            raise ValidationError(f"{name} must have shape ({n},), got {arr.shape}")
        if arr.size and (arr.min() < 1 or arr.max() > N_PA_CATEGORIES):
            raise ValidationError(f"{name} must hold attack categories in 1..{N_PA_CATEGORIES}")
        return arr

    def fit(self, sequences: Sequence[Sequence[int]], y, vocab_size: int,
            val_sequences=None, val_y=None) -> "SentenceClassifier":
        seqs = [list(check_token_ids(s, vocab_size, name=f"sequence {i}"))
                for i, s in enumerate(sequences)]
        if not seqs or any(len(s) == 0 for s in seqs):
            raise ValidationError("sequences must be non-empty")
        y = self._check_labels(y, len(seqs), "y")
        have_val = val_sequences is not None
        if have_val:
            val_seqs = [list(check_token_ids(s, vocab_size, name=f"val sequence {i}"))
                        for i, s in enumerate(val_sequences)]
            val_y = self._check_labels(val_y, len(val_seqs), "val_y")

        rng = np.random.default_rng(self.seed)
        params = SentClfParams(
            embed=Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, (vocab_size, self.embed_size))),
            w=Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, (self.embed_size, N_PA_CATEGORIES))),
            b=Tensor(np.zeros(N_PA_CATEGORIES)),
        )
        named = params.as_dict()
        opt = Adam(named, lr=self.learning_rate)
        embedder = MeanEmbedder(params.embed)
        n = len(seqs)
        best_acc = -np.inf
        best_params = params.copy()
        best_epoch = -1
        sleep = 0
        history: list[dict[str, float]] = []
        for epoch in range(self.max_epochs):
            order = rng.permutation(n)
            lr = lr_at(epoch, self.learning_rate, self.lr_decay, self.lr_decay_every)
            total = 0.0
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                padded, mask = _pad_batch([seqs[i] for i in idx])
                tape = Tape()
                pooled = embedder.embed_tokens_batch(tape, padded, mask)
                logits = ad.affine(tape, pooled, params.w, params.b)
                loss = ad.softmax_xent_rows(tape, logits, y[idx] - 1)
                tape.backward(loss)
                total += loss.item()
                clip_global_norm(named, self.clip_norm)
                opt.step(lr=lr)
                tape.zero_grads()
            entry = {"epoch": epoch, "train_loss": total}
            if have_val:
                acc = float((self._infer(val_seqs, params).argmax(axis=1) + 1 == val_y).mean())
                entry["val_acc"] = acc
                # ties refresh the kept checkpoint; only strict gains
                # reset the patience clock
                if acc >= best_acc:
                    if acc > best_acc:
                        sleep = 0
                    best_acc = acc
                    best_params = params.copy()
                    best_epoch = epoch
                else:
                    sleep += 1
            history.append(entry)
            if have_val and sleep >= self.patience:
                break
        self.params_ = best_params if have_val else params
        self.history_ = history
        self.best_epoch_ = best_epoch if have_val else len(history) - 1
        self.vocab_size_ = vocab_size
        return self

    @staticmethod
    def _infer(seqs: Sequence[Sequence[int]], params: SentClfParams) -> np.ndarray:
        padded, mask = _pad_batch(seqs)
        emb = params.embed.data[padded]                      # (n, T, d)
        pooled = (emb * mask[:, :, None]).sum(axis=1) / mask.sum(axis=1)[:, None]
        logits = pooled @ params.w.data + params.b.data
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return e / e.sum(axis=1, keepdims=True)

    def predict_proba(self, sequences) -> np.ndarray:
        check_fitted(self, "params_")
        seqs = [list(check_token_ids(s, self.vocab_size_, name=f"sequence {i}"))
                for i, s in enumerate(sequences)]
        if any(len(s) == 0 for s in seqs):
            raise ValidationError("sequences must be non-empty")
        return self._infer(seqs, self.params_)

    def predict(self, sequences) -> np.ndarray:
        return self.predict_proba(sequences).argmax(axis=1) + 1

    def freeze(self) -> "SentenceClassifier":
        check_fitted(self, "params_")
        self.params_.freeze()
        return self

    def embedder(self) -> MeanEmbedder:
        check_fitted(self, "params_")
        return MeanEmbedder(self.params_.embed)


def sentence_discriminative_loss(tape: Tape, clf: SentenceClassifier,
                                 soft_rows: Sequence[Tensor], category: int) -> Tensor:
    """-log P(category | rollout) under the frozen classifier (one sentence)."""
    if not 1 <= category <= N_PA_CATEGORIES:
        raise ValidationError(f"category must be in 1..{N_PA_CATEGORIES}, got {category}")
    params = clf.params_
    rows2d = [ad.reshape(tape, r, (1, r.shape[-1])) if r.data.ndim == 1 else r
              for r in soft_rows]
    mask = np.ones((1, len(rows2d)))
    pooled = MeanEmbedder(params.embed).embed_soft_batch(tape, rows2d, mask)
    logits = ad.affine(tape, pooled, params.w, params.b)
    return ad.softmax_xent_rows(tape, logits, np.array([category - 1]))


def sentence_losses_batch(tape: Tape, cond: np.ndarray, lg_params: LgParams,
                          sentence_clf: SentenceClassifier,
                          ref_tokens: Sequence[Sequence[int]],
                          categories: np.ndarray | None, t_max: int,
                          want_ss: bool, want_disc: bool
                          ) -> tuple[Tensor | None, Tensor | None]:
    """Soft-rollout losses for one batch; one rollout serves both terms.

    Gradients reach the generator through the probability rows; the
    classifier's tensors are frozen and accumulate nothing.
    """
    clf_params = sentence_clf.params_
    rows, _, mask = soft_decode_batch(tape, cond, lg_params, t_max=t_max)
    embedder = MeanEmbedder(clf_params.embed)
    gen_emb = embedder.embed_soft_batch(tape, rows, mask)
    l_ss = None
    if want_ss:
        ref_emb = np.stack([clf_params.embed.data[list(r)].mean(axis=0) for r in ref_tokens])
        l_ss = ad.scale(tape, ad.row_cosine_sum(tape, ad.constant(ref_emb), gen_emb), -1.0)
    l_disc = None
    if want_disc:
        logits = ad.affine(tape, gen_emb, clf_params.w, clf_params.b)
        l_disc = ad.softmax_xent_rows(tape, logits, categories - 1)
    return l_ss, l_disc


# ---------------------------------------------------------------------------
# synonym fixture consumed by the METEOR metric

DEFAULT_SYNONYMS: dict[str, list[str]] = {
    "openings": ["holes"],
    "holes": ["openings"],
    "lifelike": ["realistic"],
    "realistic": ["lifelike"],
    "shiny": ["glossy"],
    "glossy": ["shiny"],
    "large": ["oversized"],
    "oversized": ["large"],
    "photo": ["picture"],
    "picture": ["photo"],
    "bona": ["genuine"],
    "genuine": ["bona"],
}


def save_synonym_table(path: str, table: dict[str, list[str]] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table if table is not None else DEFAULT_SYNONYMS, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
