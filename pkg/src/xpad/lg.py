"""Explanation generator: a conditioned two-layer LSTM over the vocabulary.

The conditioning vector (either the 128-d feature representation alone,
or that plus the 10-d PAD probability vector) is mapped by one affine
layer to the initial (h, c) of both LSTM layers. Decoding starts from
<bos>; training is teacher-forced; inference is greedy argmax with ties
toward the lowest id and <pad>/<bos>/<unk> masked out. The soft decode
replays a rollout feeding each step the probability-weighted mixture of
word embeddings, keeping the whole path differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import LstmParams, Tape, Tensor
from .corpus import BOS, EOS, PAD, UNK, Vocabulary
from .metrics import bleu_n
from .optim import Adam, clip_global_norm, lr_at
from .validation import ValidationError, check_feature_matrix, check_fitted, check_token_ids

T_MAX = 30
EMBED_SIZE = 128
HIDDEN_SIZE = 100
INIT_SCALE = 0.08
MASKED_AT_ARGMAX = (PAD, BOS, UNK)

Mode = str  # "A" or "C"


def build_conditioning(features: np.ndarray, pad_probs: np.ndarray | None, mode: Mode) -> np.ndarray:
    """Mode A: the feature representation alone. Mode C: features ++ PAD probs."""
    if mode not in ("A", "C"):
        raise ValidationError(f"mode must be 'A' or 'C', got {mode!r}")
    feats = check_feature_matrix(features, name="features")
    if mode == "A":
        out = feats
    else:
        if pad_probs is None:
            raise ValidationError("mode C needs the PAD probability vector")
        probs = check_feature_matrix(pad_probs, name="pad_probs")
        if probs.shape[0] != feats.shape[0]:
            raise ValidationError(
                f"features rows {feats.shape[0]} != pad_probs rows {probs.shape[0]}")
        out = np.concatenate([feats, probs], axis=1)
    return out[0] if np.asarray(features).ndim == 1 else out


@dataclass
class LgParams:
    embed: Tensor          # (V, embed_size)
    cond_w: Tensor         # (d_cond, 4*hidden)
    cond_b: Tensor         # (4*hidden,)
    lstm1: LstmParams      # embed_size -> hidden
    lstm2: LstmParams      # hidden -> hidden
    out_w: Tensor          # (hidden, V)
    out_b: Tensor          # (V,)

    def as_dict(self) -> dict[str, Tensor]:
        return {
            "embed": self.embed,
            "cond_w": self.cond_w, "cond_b": self.cond_b,
            "lstm1_wx": self.lstm1.w_x, "lstm1_wh": self.lstm1.w_h, "lstm1_b": self.lstm1.b,
            "lstm2_wx": self.lstm2.w_x, "lstm2_wh": self.lstm2.w_h, "lstm2_b": self.lstm2.b,
            "out_w": self.out_w, "out_b": self.out_b,
        }

    def copy(self) -> "LgParams":
        def cp(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), t.requires_grad)
        return LgParams(
            embed=cp(self.embed), cond_w=cp(self.cond_w), cond_b=cp(self.cond_b),
            lstm1=LstmParams(cp(self.lstm1.w_x), cp(self.lstm1.w_h), cp(self.lstm1.b)),
            lstm2=LstmParams(cp(self.lstm2.w_x), cp(self.lstm2.w_h), cp(self.lstm2.b)),
            out_w=cp(self.out_w), out_b=cp(self.out_b),
        )

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.lstm1.hidden_size

    @property
    def cond_dim(self) -> int:
        return self.cond_w.shape[0]


def init_lg_params(vocab_size: int, cond_dim: int, rng: np.random.Generator,
                   embed_size: int = EMBED_SIZE, hidden_size: int = HIDDEN_SIZE) -> LgParams:
    """Uniform(-0.08, 0.08) weights, zero biases, forget-gate bias +1."""
    def u(*shape: int) -> Tensor:
        return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, shape))

    def cell(d_in: int) -> LstmParams:
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = 1.0  # forget gate opens at init
        return LstmParams(w_x=u(d_in, 4 * hidden_size),
                          w_h=u(hidden_size, 4 * hidden_size),
                          b=Tensor(b))

    return LgParams(
        embed=u(vocab_size, embed_size),
        cond_w=u(cond_dim, 4 * hidden_size),
        cond_b=Tensor(np.zeros(4 * hidden_size)),
        lstm1=cell(embed_size),
        lstm2=cell(hidden_size),
        out_w=u(hidden_size, vocab_size),
        out_b=Tensor(np.zeros(vocab_size)),
    )


State = tuple[Tensor, Tensor, Tensor, Tensor]  # h1, c1, h2, c2


def init_state(tape: Tape, cond: np.ndarray, params: LgParams) -> State:
    """Affine projection of the conditioning into (h0, c0) of both layers."""
    cond = check_feature_matrix(cond, params.cond_dim, name="conditioning")
    s = ad.affine(tape, ad.constant(cond), params.cond_w, params.cond_b)
    dh = params.hidden_size
    return (ad.slice_cols(tape, s, 0, dh),
            ad.slice_cols(tape, s, dh, 2 * dh),
            ad.slice_cols(tape, s, 2 * dh, 3 * dh),
            ad.slice_cols(tape, s, 3 * dh, 4 * dh))


def _step(tape: Tape, x: Tensor, state: State, params: LgParams, *,
          training: bool = False, dropout_rate: float = 0.0,
          rng: np.random.Generator | None = None) -> tuple[Tensor, State]:
    h1, c1, h2, c2 = state
    h1, c1 = ad.lstm_cell(tape, x, h1, c1, params.lstm1)
    h2, c2 = ad.lstm_cell(tape, h1, h2, c2, params.lstm2)
    out = ad.dropout(tape, h2, dropout_rate, training, rng) if training else h2
    logits = ad.affine(tape, out, params.out_w, params.out_b)
    return logits, (h1, c1, h2, c2)


def forward_teacher_forced_batch(tape: Tape, cond: np.ndarray, refs: np.ndarray,
                                 params: LgParams, *, training: bool = False,
                                 dropout_rate: float = 0.0,
                                 rng: np.random.Generator | None = None) -> list[Tensor]:
    """Per-step logits for a padded batch of reference sequences.

    refs is (n, T) of token ids padded with <pad>; step t consumes <bos>
    for t=0 and refs[:, t-1] after, and predicts refs[:, t]. Positions at
    or past a sequence's end must be masked out of the loss by the caller.
    """
    refs = np.asarray(refs, dtype=np.int64)
    if refs.ndim != 2:
        raise ValidationError(f"refs must be (n, T), got shape {refs.shape}")
    n, t_len = refs.shape
    state = init_state(tape, cond, params)
    logits: list[Tensor] = []
    for t in range(t_len):
        ids = np.full(n, BOS, dtype=np.int64) if t == 0 else refs[:, t - 1]
        x = ad.embedding_lookup(tape, params.embed, ids)
        step_logits, state = _step(tape, x, state, params, training=training,
                                   dropout_rate=dropout_rate, rng=rng)
        logits.append(step_logits)
    return logits


def forward_teacher_forced(tape: Tape, cond: np.ndarray, reference: Sequence[int],
                           params: LgParams, *, training: bool = False,
                           dropout_rate: float = 0.0,
                           rng: np.random.Generator | None = None) -> list[Tensor]:
    """Single-sequence teacher forcing; returns one 1-d logit row per token."""
    ref = check_token_ids(reference, params.vocab_size, name="reference")
    if ref.size == 0:
        raise ValidationError("reference must contain at least one token")
    rows = forward_teacher_forced_batch(
        tape, np.asarray(cond)[None, :], ref[None, :], params,
        training=training, dropout_rate=dropout_rate, rng=rng)
    return [ad.reshape(tape, r, (params.vocab_size,)) for r in rows]


# ---------------------------------------------------------------------------
# greedy decoding (pure numpy, no gradients)

@dataclass
class GeneratedSentence:
    token_ids: list[int]
    prob_rows: np.ndarray = field(repr=False)  # (len(token_ids), V) simplex rows

    def words(self, vocab: Vocabulary) -> list[str]:
        return vocab.decode(self.token_ids)


def _np_cell(x: np.ndarray, h: np.ndarray, c: np.ndarray, p: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    dh = p.hidden_size
    z = x @ p.w_x.data + h @ p.w_h.data + p.b.data
    with np.errstate(over="ignore"):
        gi = 1.0 / (1.0 + np.exp(-z[:, :dh]))
        gf = 1.0 / (1.0 + np.exp(-z[:, dh:2 * dh]))
        go = 1.0 / (1.0 + np.exp(-z[:, 3 * dh:]))
    gg = np.tanh(z[:, 2 * dh:3 * dh])
    c_new = gf * c + gi * gg
    return np.tanh(c_new) * go, c_new


def _np_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_decode_batch(cond: np.ndarray, params: LgParams, t_max: int = T_MAX) -> list[GeneratedSentence]:
    cond = check_feature_matrix(cond, params.cond_dim, name="conditioning")
    n = cond.shape[0]
    s = cond @ params.cond_w.data + params.cond_b.data
    dh = params.hidden_size
    h1, c1, h2, c2 = (s[:, :dh], s[:, dh:2 * dh], s[:, 2 * dh:3 * dh], s[:, 3 * dh:])
    x = np.repeat(params.embed.data[BOS][None, :], n, axis=0)
    tokens: list[list[int]] = [[] for _ in range(n)]
    rows: list[list[np.ndarray]] = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    for _ in range(t_max):
        h1, c1 = _np_cell(x, h1, c1, params.lstm1)
        h2, c2 = _np_cell(h1, h2, c2, params.lstm2)
        logits = h2 @ params.out_w.data + params.out_b.data
        probs = _np_softmax(logits)
        masked = logits.copy()
        masked[:, list(MASKED_AT_ARGMAX)] = -np.inf
        nxt = masked.argmax(axis=1)  # first maximum = lowest id on ties
        for i in range(n):
            if active[i]:
                if nxt[i] == EOS:
                    active[i] = False
                else:
                    tokens[i].append(int(nxt[i]))
                    rows[i].append(probs[i])
        if not active.any():
            break
        x = params.embed.data[nxt]
    v = params.vocab_size
    return [GeneratedSentence(token_ids=tokens[i],
                              prob_rows=np.array(rows[i]).reshape(len(tokens[i]), v))
            for i in range(n)]


def greedy_decode(cond: np.ndarray, params: LgParams, t_max: int = T_MAX) -> GeneratedSentence:
    return greedy_decode_batch(np.asarray(cond)[None, :], params, t_max)[0]


# ---------------------------------------------------------------------------
# soft decoding (differentiable rollout)

def soft_decode_batch(tape: Tape, cond: np.ndarray, params: LgParams,
                      t_max: int = T_MAX, n_steps: int | None = None
                      ) -> tuple[list[Tensor], list[Tensor], np.ndarray]:
    """Differentiable rollout feeding expected embeddings.

    Each sample rolls for its greedy-decode length (minimum 1, computed
    alongside) unless n_steps pins a common length. Returns per-step
    probability rows (n, V), per-step embedding mixtures (n, embed), and
    the (n, T) activity mask. No dropout: the rollout is an inference
    surrogate that stays deterministic given the parameters.
    """
    cond = check_feature_matrix(cond, params.cond_dim, name="conditioning")
    n = cond.shape[0]
    if n_steps is not None:
        if n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
        lengths = np.full(n, n_steps, dtype=np.int64)
    else:
        decoded = greedy_decode_batch(cond, params, t_max)
        lengths = np.array([max(len(g.token_ids), 1) for g in decoded], dtype=np.int64)
    t_len = int(lengths.max())
    mask = (np.arange(t_len)[None, :] < lengths[:, None]).astype(np.float64)

    state = init_state(tape, cond, params)
    x = ad.embedding_lookup(tape, params.embed, np.full(n, BOS, dtype=np.int64))
    prob_rows: list[Tensor] = []
    mixtures: list[Tensor] = []
    for _ in range(t_len):
        logits, state = _step(tape, x, state, params)
        rows = ad.softmax_rows(tape, logits)
        mix = ad.matmul(tape, rows, params.embed)
        prob_rows.append(rows)
        mixtures.append(mix)
        x = mix
    return prob_rows, mixtures, mask


def soft_decode(tape: Tape, cond: np.ndarray, params: LgParams,
                t_max: int = T_MAX, n_steps: int | None = None
                ) -> tuple[list[Tensor], list[Tensor]]:
    """Single-sample soft rollout: 1-d probability rows and mixtures."""
    rows, mixes, mask = soft_decode_batch(
        tape, np.asarray(cond)[None, :], params, t_max, n_steps)
    t_used = int(mask[0].sum())
    v = params.vocab_size
    e = params.embed.shape[1]
    return ([ad.reshape(tape, r, (v,)) for r in rows[:t_used]],
            [ad.reshape(tape, m, (e,)) for m in mixes[:t_used]])


# ---------------------------------------------------------------------------
# estimator

class ExplanationGenerator(BaseEstimator):
    """Conditioned LSTM text generator trained with the combined loss.

    fit() consumes one row of conditioning per (sample, annotation) pair
    plus the matching token-id references; the optional sentence
    classifier supplies the frozen embedder/discriminator for the
    semantic and discriminative loss terms.
    """

    def __init__(self, embed_size: int = EMBED_SIZE, hidden_size: int = HIDDEN_SIZE,
                 t_max: int = T_MAX, learning_rate: float = 2e-4, batch_size: int = 32,
                 max_epochs: int = 120, patience: int = 10, dropout: float = 0.5,
                 clip_norm: float = 5.0, lr_decay: float = 0.5, lr_decay_every: int = 20,
                 lambda_ww: float = 1.0, lambda_disc: float = 0.2, lambda_ss: float = 0.5,
                 seed: int = 0):
        self.embed_size = embed_size
        self.hidden_size = hidden_size
        self.t_max = t_max
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout = dropout
        self.clip_norm = clip_norm
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.lambda_ww = lambda_ww
        self.lambda_disc = lambda_disc
        self.lambda_ss = lambda_ss
        self.seed = seed

    def fit(self, cond, references, vocab: Vocabulary, categories=None,
            val_cond=None, val_references=None, sentence_clf=None,
            append_eos: bool = True) -> "ExplanationGenerator":
        # local import: losses builds on this module's forward ops
        from .losses import sentence_losses_batch

        cond = check_feature_matrix(cond, name="conditioning")
        refs = [list(check_token_ids(r, len(vocab), name=f"reference {i}"))
                for i, r in enumerate(references)]
        if len(refs) != cond.shape[0]:
            raise ValidationError(
                f"{cond.shape[0]} conditioning rows vs {len(refs)} references")
        if any(len(r) == 0 for r in refs):
            raise ValidationError("references must be non-empty")
        use_soft = self.lambda_disc > 0.0 or self.lambda_ss > 0.0
        if use_soft and sentence_clf is None:
            raise ValidationError(
                "lambda_disc/lambda_ss > 0 require a fitted sentence classifier")
        if self.lambda_disc > 0.0:
            if categories is None:
                raise ValidationError("lambda_disc > 0 requires per-pair categories")
            categories = np.asarray(categories, dtype=np.int64)
            if categories.shape != (cond.shape[0],):
                raise ValidationError("categories must align with conditioning rows")
            if categories.size and (categories.min() < 1 or categories.max() > 9):
                raise ValidationError("categories must be attack categories in 1..9")
        targets = [r + [EOS] for r in refs] if append_eos else [list(r) for r in refs]

        have_val = val_cond is not None
        if have_val:
            val_cond = check_feature_matrix(val_cond, cond.shape[1], name="val_cond")
            if val_references is None or len(val_references) != val_cond.shape[0]:
                raise ValidationError("val_references must align with val_cond rows")

        rng = np.random.default_rng(self.seed)
        params = init_lg_params(len(vocab), cond.shape[1], rng,
                                embed_size=self.embed_size, hidden_size=self.hidden_size)
        named = params.as_dict()
        opt = Adam(named, lr=self.learning_rate)
        n = cond.shape[0]
        best_bleu = -np.inf
        best_params = params.copy()
        best_epoch = -1
        sleep = 0
        history: list[dict[str, float]] = []
        for epoch in range(self.max_epochs):
            order = rng.permutation(n)
            lr = lr_at(epoch, self.learning_rate, self.lr_decay, self.lr_decay_every)
            tot_ww = tot_ss = tot_disc = 0.0
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                batch_refs = [targets[i] for i in idx]
                t_len = max(len(r) for r in batch_refs)
                padded = np.full((len(idx), t_len), PAD, dtype=np.int64)
                mask = np.zeros((len(idx), t_len))
                for j, r in enumerate(batch_refs):
                    padded[j, :len(r)] = r
                    mask[j, :len(r)] = 1.0
                tape = Tape()
                logits = forward_teacher_forced_batch(
                    tape, cond[idx], padded, params, training=True,
                    dropout_rate=self.dropout, rng=rng)
                l_ww = None
                for t, lg_t in enumerate(logits):
                    term = ad.softmax_xent_rows(tape, lg_t, padded[:, t], mask[:, t])
                    l_ww = term if l_ww is None else ad.add(tape, l_ww, term)
                loss = ad.scale(tape, l_ww, self.lambda_ww)
                tot_ww += l_ww.item()
                if use_soft:
                    ref_tokens = [refs[i] for i in idx]
                    cats = categories[idx] if self.lambda_disc > 0.0 else None
                    l_ss, l_disc = sentence_losses_batch(
                        tape, cond[idx], params, sentence_clf, ref_tokens, cats,
                        t_max=self.t_max,
                        want_ss=self.lambda_ss > 0.0,
                        want_disc=self.lambda_disc > 0.0)
                    if l_ss is not None:
                        loss = ad.add(tape, loss, ad.scale(tape, l_ss, self.lambda_ss))
                        tot_ss += l_ss.item()
                    if l_disc is not None:
                        loss = ad.add(tape, loss, ad.scale(tape, l_disc, self.lambda_disc))
                        tot_disc += l_disc.item()
                tape.backward(loss)
                clip_global_norm(named, self.clip_norm)
                opt.step(lr=lr)
                tape.zero_grads()
            entry = {"epoch": epoch, "ww": tot_ww, "ss": tot_ss, "disc": tot_disc}
            if have_val:
                bleu = self._validation_bleu(val_cond, val_references, params)
                entry["val_bleu1"] = bleu
                # ties refresh the kept checkpoint; only strict gains
                # reset the patience clock
                if bleu >= best_bleu:
                    if bleu > best_bleu:
                        sleep = 0
                    best_bleu = bleu
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
        self.vocab_hash_ = vocab.sha256
        self.n_features_in_ = cond.shape[1]
        return self

    def _validation_bleu(self, val_cond: np.ndarray, val_references, params: LgParams) -> float:
        decoded = greedy_decode_batch(val_cond, params, self.t_max)
        scores = [bleu_n(g.token_ids, [list(r) for r in refs], 1)
                  for g, refs in zip(decoded, val_references)]
        return float(np.mean(scores))

    def generate(self, cond) -> list[GeneratedSentence]:
        check_fitted(self, "params_")
        cond = check_feature_matrix(cond, self.params_.cond_dim, name="conditioning")
        return greedy_decode_batch(cond, self.params_, self.t_max)

    def predict(self, cond) -> list[list[int]]:
        return [g.token_ids for g in self.generate(cond)]
