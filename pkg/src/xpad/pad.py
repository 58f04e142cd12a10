"""10-way presentation-attack-detection head and its score metrics.

Architecture: affine(d_feat -> hidden) + ReLU, affine(hidden -> 10),
softmax. Class 0 is bona fide; pa_score = 1 - P(bona fide). The ReLU
hidden activation doubles as the feature representation consumed by the
explanation generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .optim import Adam, clip_global_norm, lr_at
from .validation import ValidationError, check_feature_matrix, check_fitted, check_labels

N_CATEGORIES = 10


@dataclass
class PadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    frozen: bool = False

    def as_dict(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def freeze(self) -> None:
        self.frozen = True
        for t in self.as_dict().values():
            t.requires_grad = False

    def copy(self) -> "PadParams":
        return PadParams(
            w1=Tensor(self.w1.data.copy(), self.w1.requires_grad),
            b1=Tensor(self.b1.data.copy(), self.b1.requires_grad),
            w2=Tensor(self.w2.data.copy(), self.w2.requires_grad),
            b2=Tensor(self.b2.data.copy(), self.b2.requires_grad),
            frozen=self.frozen,
        )

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w1.shape[1]


INIT_SCALE = 0.08


def init_pad_params(feature_dim: int, hidden_size: int, rng: np.random.Generator,
                    n_categories: int = N_CATEGORIES) -> PadParams:
    return PadParams(
        w1=Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, (feature_dim, hidden_size))),
        b1=Tensor(np.zeros(hidden_size)),
        w2=Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, (hidden_size, n_categories))),
        b2=Tensor(np.zeros(n_categories)),
    )


@dataclass
class PadPrediction:
    probs: np.ndarray            # (10,), sums to 1
    pa_score: float              # 1 - P(bona fide)

    @property
    def category(self) -> int:
        return int(np.argmax(self.probs))


def pad_forward_batch(tape: Tape, x: np.ndarray, params: PadParams, *,
                      training: bool = False, dropout_rate: float = 0.0,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Returns (logits, hidden); hidden is the 128-d ReLU representation."""
    xin = ad.constant(x)
    h = ad.relu(tape, ad.affine(tape, xin, params.w1, params.b1))
    h_used = ad.dropout(tape, h, dropout_rate, training, rng) if training else h
    logits = ad.affine(tape, h_used, params.w2, params.b2)
    return logits, h


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def pad_forward(features: np.ndarray, params: PadParams) -> tuple[PadPrediction, np.ndarray]:
    """Single-sample inference; returns the prediction and the hidden vector."""
    x = check_feature_matrix(features, params.feature_dim, name="features")
    if x.shape[0] != 1:
        raise ValidationError(f"pad_forward takes one feature vector, got {x.shape[0]} rows")
    h = np.maximum(x @ params.w1.data + params.b1.data, 0.0)
    probs = _softmax(h @ params.w2.data + params.b2.data)[0]
    return PadPrediction(probs=probs, pa_score=1.0 - float(probs[0])), h[0]


def pad_infer_batch(x: np.ndarray, params: PadParams) -> tuple[np.ndarray, np.ndarray]:
    """(probs (n,10), hidden (n,hidden_size)) without building a tape."""
    x = check_feature_matrix(x, params.feature_dim)
    h = np.maximum(x @ params.w1.data + params.b1.data, 0.0)
    return _softmax(h @ params.w2.data + params.b2.data), h


def pad_loss(probs: np.ndarray, labels) -> float:
    """Sum over the batch of -log P(correct class)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValidationError(f"probs must be 2-d, got shape {probs.shape}")
    labels = check_labels(labels, probs.shape[1], n_rows=probs.shape[0], name="labels")
    picked = probs[np.arange(len(labels)), labels]
    if (picked <= 0).any():
        raise ValidationError("probabilities must be positive to take logs")
    return float(-np.log(picked).sum())


# ---------------------------------------------------------------------------
# score metrics

def roc_auc(bona_scores, pa_scores) -> float:
    """Fraction of (bona, attack) pairs ranked correctly; ties count 0.5."""
    b = np.asarray(bona_scores, dtype=np.float64)
    p = np.asarray(pa_scores, dtype=np.float64)
    if b.size == 0 or p.size == 0:
        raise ValidationError("roc_auc needs at least one score on each side")
    gt = (p[:, None] > b[None, :]).sum()
    eq = (p[:, None] == b[None, :]).sum()
    return float((gt + 0.5 * eq) / (p.size * b.size))


def eer(bona_scores, pa_scores) -> float:
    """Equal error rate over a sweep of every distinct score.

    At threshold t, FAR = P(pa_score of an attack < t) and
    FRR = P(pa_score of a bona fide > t); scores equal to the threshold
    count as correct on both sides. Returns (FAR+FRR)/2 at the threshold
    minimizing |FAR-FRR|, ties resolved toward the lower threshold.
    """
    b = np.asarray(bona_scores, dtype=np.float64)
    p = np.asarray(pa_scores, dtype=np.float64)
    if b.size == 0 or p.size == 0:
        raise ValidationError("eer needs at least one score on each side")
    best = None
    for t in np.unique(np.concatenate([b, p])):
        far = float((p < t).mean())
        frr = float((b > t).mean())
        key = abs(far - frr)
        if best is None or key < best[0]:
            best = (key, (far + frr) / 2.0)
    return best[1]


# ---------------------------------------------------------------------------
# estimator

class PadClassifier(BaseEstimator):
    """Two-layer softmax classifier over PAD categories.

    fit() runs Adam with the step-decay schedule, summed cross-entropy,
    global-norm gradient clipping, and (when a validation set is given)
    early stopping on validation AUC, restoring the best checkpoint.
    """

    def __init__(self, hidden_size: int = 128, learning_rate: float = 2e-4,
                 batch_size: int = 32, max_epochs: int = 120, patience: int = 15,
                 dropout: float = 0.5, clip_norm: float = 5.0,
                 lr_decay: float = 0.5, lr_decay_every: int = 20, seed: int = 0):
        self.hidden_size = hidden_size
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout = dropout
        self.clip_norm = clip_norm
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None) -> "PadClassifier":
        X = check_feature_matrix(X)
        y = check_labels(y, N_CATEGORIES, n_rows=X.shape[0])
        missing = sorted(set(range(N_CATEGORIES)) - set(int(v) for v in y))
        if missing:
            raise ValidationError(f"training split lacks categories {missing}")
        have_val = X_val is not None
        if have_val:
            X_val = check_feature_matrix(X_val, X.shape[1], name="X_val")
            y_val = check_labels(y_val, N_CATEGORIES, n_rows=X_val.shape[0], name="y_val")
            if not ((y_val == 0).any() and (y_val > 0).any()):
                raise ValidationError("validation set needs both bona-fide and attack samples")

        rng = np.random.default_rng(self.seed)
        params = init_pad_params(X.shape[1], self.hidden_size, rng)
        named = params.as_dict()
        opt = Adam(named, lr=self.learning_rate)
        n = X.shape[0]
        best_auc = -np.inf
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
                tape = Tape()
                logits, _ = pad_forward_batch(
                    tape, X[idx], params, training=True,
                    dropout_rate=self.dropout, rng=rng)
                loss = ad.softmax_xent_rows(tape, logits, y[idx])
                tape.backward(loss)
                total += loss.item()
                clip_global_norm(named, self.clip_norm)
                opt.step(lr=lr)
                tape.zero_grads()
            entry = {"epoch": epoch, "train_loss": total}
            if have_val:
                scores = self.pa_scores(X_val, params=params)
                auc = roc_auc(scores[y_val == 0], scores[y_val > 0])
                entry["val_auc"] = auc
                # ties refresh the checkpoint: among equally-validating
                # epochs prefer the most trained, but only strict gains
                # reset the patience clock
                if auc >= best_auc:
                    if auc > best_auc:
                        sleep = 0
                    best_auc = auc
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
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self) -> PadParams:
        check_fitted(self, "params_")
        return self.params_

    def predict_proba(self, X, params: PadParams | None = None) -> np.ndarray:
        params = params or self._check()
        probs, _ = pad_infer_batch(X, params)
        return probs

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def pa_scores(self, X, params: PadParams | None = None) -> np.ndarray:
        return 1.0 - self.predict_proba(X, params=params)[:, 0]

    def hidden_features(self, X) -> np.ndarray:
        _, h = pad_infer_batch(X, self._check())
        return h

    def freeze(self) -> "PadClassifier":
        self._check().freeze()
        return self
