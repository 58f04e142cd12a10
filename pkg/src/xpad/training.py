"""Staged three-fold training driver and report emission.

Each fold runs three stages on subject-disjoint splits: (1) the PAD head,
(2) the sentence classifier whose embedding table doubles as the sentence
embedder, (3) the explanation generator against the frozen stages.  All
randomness derives from a single run seed, so a rerun reproduces every
checkpoint and report byte (manifests differ only in wall-clock).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import (
    load_lg,
    load_pad,
    load_sentence_classifier,
    save_lg,
    save_pad,
    save_sentence_classifier,
)
from .corpus import (
    DataError,
    FoldSplit,
    PA_CATEGORIES,
    PadCategory,
    Sample,
    Vocabulary,
    build_vocab,
    file_sha256,
    split_folds,
    tokenize,
)
from .lg import ExplanationGenerator, LgParams, build_conditioning, greedy_decode_batch
from .losses import DEFAULT_SYNONYMS, SentenceClassifier
from .metrics import MetricRow, MetricsReport, PadRow, aggregate, report_to_csv, report_to_text, score_sentence, METRIC_KEYS, ALL_PAS
from .pad import PadClassifier, PadParams, eer, pad_infer_batch, roc_auc

MODES = ("A", "C")

# stage indices feeding the per-stage seed stream
PAD_STAGE, CLF_STAGE, LG_STAGE = 1, 2, 3


@dataclass
class TrainConfig:
    mode: str = "C"
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 2e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 20
    dropout: float = 0.5
    clip_norm: float = 5.0
    t_max: int = 30
    hidden_size: int = 128
    embed_size: int = 128
    lg_hidden_size: int = 100
    pad_max_epochs: int = 120
    pad_patience: int = 15
    clf_max_epochs: int = 120
    clf_patience: int = 10
    lg_max_epochs: int = 120
    lg_patience: int = 10
    lambda_ww: float = 1.0
    lambda_disc: float = 0.2
    lambda_ss: float = 0.5
    min_count: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise DataError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.t_max < 1:
            raise DataError(f"t_max must be >= 1, got {self.t_max}")
        for name in ("pad_max_epochs", "clf_max_epochs", "lg_max_epochs",
                     "pad_patience", "clf_patience", "lg_patience",
                     "lr_decay_every", "min_count"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lambda_ww", "lambda_disc", "lambda_ss"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be non-negative, got {getattr(self, name)}")

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls().__dict__)
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def stage_seed(seed: int, fold: int, stage: int) -> int:
    """Independent deterministic seed stream per (run, fold, stage)."""
    return int(np.random.SeedSequence([seed, fold, stage]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# fold materialization

@dataclass
class FoldData:
    index: int
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    vocab: Vocabulary


def materialize_fold(samples: Sequence[Sample], split: FoldSplit, index: int,
                     min_count: int = 1) -> FoldData:
    """Resolve a subject split into sample lists plus the fold-local vocabulary.

    The vocabulary sees training descriptions only; validation and test
    words missing from it fall back to <unk> at encoding time.
    """
    train_subj, val_subj, test_subj = set(split.train), set(split.val), set(split.test)
    train = [s for s in samples if s.subject_id in train_subj]
    val = [s for s in samples if s.subject_id in val_subj]
    test = [s for s in samples if s.subject_id in test_subj]
    vocab = build_vocab((d for s in train for d in s.descriptions), min_count=min_count)
    return FoldData(index=index, train=train, val=val, test=test, vocab=vocab)


def _features(samples: Sequence[Sample], dim: int | None = None) -> np.ndarray:
    if not samples:
        return np.zeros((0, dim or 0))
    return np.stack([s.features for s in samples]).astype(np.float64)


def _labels(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([int(s.category) for s in samples], dtype=np.int64)


def _pa_only(samples: Sequence[Sample]) -> list[Sample]:
    return [s for s in samples if s.category != PadCategory.BONA_FIDE]


# ---------------------------------------------------------------------------
# stages

def train_pad_stage(fold: FoldData, config: TrainConfig) -> PadClassifier:
    clf = PadClassifier(
        hidden_size=config.hidden_size,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        max_epochs=config.pad_max_epochs,
        patience=config.pad_patience,
        dropout=config.dropout,
        clip_norm=config.clip_norm,
        lr_decay=config.lr_decay,
        lr_decay_every=config.lr_decay_every,
        seed=stage_seed(config.seed, fold.index, PAD_STAGE),
    )
    clf.fit(_features(fold.train), _labels(fold.train),
            _features(fold.val), _labels(fold.val))
    return clf.freeze()


def _description_pairs(samples: Sequence[Sample], vocab: Vocabulary
                       ) -> tuple[list[list[int]], np.ndarray, list[int]]:
    """One (token ids, category, sample index) entry per PA description."""
    seqs: list[list[int]] = []
    cats: list[int] = []
    owner: list[int] = []
    for i, s in enumerate(samples):
        if s.category == PadCategory.BONA_FIDE:
            continue
        for d in s.descriptions:
            seqs.append(vocab.encode_text(d))
            cats.append(int(s.category))
            owner.append(i)
    return seqs, np.array(cats, dtype=np.int64), owner


def train_sentence_classifier(fold: FoldData, config: TrainConfig
                              ) -> SentenceClassifier | None:
    """Stage 2; skipped when neither sentence loss is active."""
    if config.lambda_disc == 0.0 and config.lambda_ss == 0.0:
        return None
    train_seqs, train_y, _ = _description_pairs(fold.train, fold.vocab)
    val_seqs, val_y, _ = _description_pairs(fold.val, fold.vocab)
    clf = SentenceClassifier(
        embed_size=config.embed_size,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        max_epochs=config.clf_max_epochs,
        patience=config.clf_patience,
        clip_norm=config.clip_norm,
        lr_decay=config.lr_decay,
        lr_decay_every=config.lr_decay_every,
        seed=stage_seed(config.seed, fold.index, CLF_STAGE),
    )
    clf.fit(train_seqs, train_y, len(fold.vocab),
            val_sequences=val_seqs or None, val_y=val_y if len(val_seqs) else None)
    return clf.freeze()


def _conditioning(pad_params: PadParams, samples: Sequence[Sample], mode: str) -> np.ndarray:
    """Mode A conditions on the feature vector alone; mode C appends the
    frozen detector's 10-way probability vector."""
    x = _features(samples, pad_params.feature_dim)
    if mode == "A":
        return build_conditioning(x, None, "A")
    probs, _ = pad_infer_batch(x, pad_params)
    return build_conditioning(x, probs, "C")


def train_lg_stage(fold: FoldData, pad_params: PadParams,
                   sentence_clf: SentenceClassifier | None,
                   config: TrainConfig) -> ExplanationGenerator:
    """Stage 3: one training pair per annotation, validation one row per sample."""
    pa_train = _pa_only(fold.train)
    if not pa_train:
        raise DataError(f"fold {fold.index}: no attack samples in the training split")
    cond_rows = _conditioning(pad_params, pa_train, config.mode)
    refs: list[list[int]] = []
    cats: list[int] = []
    expand: list[int] = []
    for i, s in enumerate(pa_train):
        for d in s.descriptions:
            refs.append(fold.vocab.encode_text(d))
            cats.append(int(s.category))
            expand.append(i)
    cond = cond_rows[np.array(expand)]

    pa_val = _pa_only(fold.val)
    val_cond = None
    val_refs = None
    if pa_val:
        val_cond = _conditioning(pad_params, pa_val, config.mode)
        val_refs = [[fold.vocab.encode_text(d) for d in s.descriptions] for s in pa_val]

    gen = ExplanationGenerator(
        embed_size=config.embed_size,
        hidden_size=config.lg_hidden_size,
        t_max=config.t_max,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        max_epochs=config.lg_max_epochs,
        patience=config.lg_patience,
        dropout=config.dropout,
        clip_norm=config.clip_norm,
        lr_decay=config.lr_decay,
        lr_decay_every=config.lr_decay_every,
        lambda_ww=config.lambda_ww,
        lambda_disc=config.lambda_disc,
        lambda_ss=config.lambda_ss,
        seed=stage_seed(config.seed, fold.index, LG_STAGE),
    )
    gen.fit(cond, refs, fold.vocab, categories=cats,
            val_cond=val_cond, val_references=val_refs, sentence_clf=sentence_clf)
    return gen


# freeze contract: upstream stages must come out of LG training bit-identical

def _snapshot(named: dict) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in named.items()}


def _assert_unchanged(before: dict[str, np.ndarray], named: dict, owner: str) -> None:
    for k, v in named.items():
        if not np.array_equal(before[k], v.data):
            raise RuntimeError(f"frozen {owner} parameter {k!r} changed during training")


# ---------------------------------------------------------------------------
# evaluation

def _score_fold(fold: FoldData, pad_params: PadParams, lg_params: LgParams,
                vocab: Vocabulary, mode: str, t_max: int,
                synonyms: dict[str, list[str]] | None = None
                ) -> tuple[list[tuple[int, dict[str, float]]], list[dict], float, float]:
    """Per-sample metric records plus PAD AUC/EER on the fold's test split."""
    if synonyms is None:
        synonyms = DEFAULT_SYNONYMS
    x = _features(fold.test, pad_params.feature_dim)
    y = _labels(fold.test)
    if not (y == 0).any() or not (y != 0).any():
        raise DataError(f"fold {fold.index}: test split needs both bona-fide and attacks")
    probs, _ = pad_infer_batch(x, pad_params)
    scores = 1.0 - probs[:, 0]
    auc = roc_auc(scores[y == 0], scores[y != 0])
    err = eer(scores[y == 0], scores[y != 0])

    pa_idx = np.flatnonzero(y != 0)
    cond = build_conditioning(x[pa_idx], probs[pa_idx] if mode == "C" else None, mode)
    decoded = greedy_decode_batch(cond, lg_params, t_max)
    records: list[tuple[int, dict[str, float]]] = []
    audit: list[dict] = []
    for row, i in enumerate(pa_idx):
        sample = fold.test[i]
        hyp = decoded[row].words(vocab)
        refs = [tokenize(d) for d in sample.descriptions]
        sc = score_sentence(hyp, refs, synonyms)
        records.append((int(sample.category), sc))
        audit.append({
            "sample_id": sample.sample_id,
            "fold": fold.index,
            "category": PadCategory(sample.category).label,
            "predicted_category": PadCategory(int(probs[i].argmax())).label,
            "pa_score": float(scores[i]),
            "hypothesis": " ".join(hyp),
            "references": list(sample.descriptions),
            **{k: float(v) for k, v in sc.items()},
        })
    return records, audit, auc, err


def evaluate_fold(fold: FoldData, pad_params: PadParams, lg_params: LgParams,
                  vocab: Vocabulary, mode: str, t_max: int = 30,
                  synonyms: dict[str, list[str]] | None = None
                  ) -> tuple[MetricsReport, list[dict]]:
    records, audit, auc, err = _score_fold(fold, pad_params, lg_params, vocab,
                                           mode, t_max, synonyms)
    rows = aggregate(records, [c.label for c in PA_CATEGORIES])
    report = MetricsReport(rows=rows,
                           pad_rows=[PadRow("PAD", len(fold.test), auc, err)])
    return report, audit


def summarize_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Macro average: unweighted mean over folds of each row's per-fold means."""
    labels = [row.label for row in reports[0].rows]
    rows: list[MetricRow] = []
    for pos, label in enumerate(labels):
        per_fold = [r.rows[pos] for r in reports]
        filled = [row for row in per_fold if row.means is not None]
        n = sum(row.n for row in per_fold)
        if not filled:
            rows.append(MetricRow(label=label, n=n, means=None, stds=None))
            continue
        means = {k: float(np.mean([row.means[k] for row in filled])) for k in METRIC_KEYS}
        stds = {k: float(np.mean([row.stds[k] for row in filled])) for k in METRIC_KEYS}
        rows.append(MetricRow(label=label, n=n, means=means, stds=stds))
    pad_rows = [PadRow(f"PAD fold-{k}", rep.pad_rows[0].n,
                       rep.pad_rows[0].auc, rep.pad_rows[0].eer)
                for k, rep in enumerate(reports)]
    pad_rows.append(PadRow(
        "PAD mean",
        sum(p.n for p in pad_rows),
        float(np.mean([p.auc for p in pad_rows])),
        float(np.mean([p.eer for p in pad_rows])),
    ))
    return MetricsReport(rows=rows, pad_rows=pad_rows)


# ---------------------------------------------------------------------------
# whole runs

def _config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _corpus_hash(samples: Sequence[Sample], data_path: str | None) -> str:
    if data_path is not None:
        return file_sha256(data_path)
    h = hashlib.sha256()
    for s in samples:
        h.update(s.sample_id.encode())
        h.update(s.subject_id.encode())
        h.update(bytes([s.category]))
        h.update(np.ascontiguousarray(s.features, dtype=np.float64).tobytes())
        for d in s.descriptions:
            h.update(d.encode())
    return h.hexdigest()


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_audit(path: str, audit: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in audit:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _write_manifest(out_dir: str, payload: dict) -> None:
    path = os.path.join(out_dir, "run-manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def run_threefold(samples: Sequence[Sample], config: TrainConfig, out_dir: str,
                  data_path: str | None = None) -> dict:
    """Train and evaluate all three folds; write reports, checkpoints, manifest.

    Returns the manifest dict.  On a stage failure the manifest is still
    written with status "incomplete" before the error propagates.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    plan = split_folds(samples, config.seed)
    manifest: dict = {
        "tool_version": __version__,
        "seed": config.seed,
        "mode": config.mode,
        "config": config.to_dict(),
        "config_hash": _config_hash(config),
        "corpus_hash": _corpus_hash(samples, data_path),
        "n_samples": len(samples),
        "status": "incomplete",
        "timing": {},
    }
    timing = manifest["timing"]
    reports: list[MetricsReport] = []
    try:
        for k, split in enumerate(plan.folds):
            fold = materialize_fold(samples, split, k, config.min_count)
            fold_dir = os.path.join(out_dir, f"fold-{k}")
            ckpt_dir = os.path.join(fold_dir, "checkpoints")
            os.makedirs(ckpt_dir, exist_ok=True)

            t0 = time.perf_counter()
            pad_clf = train_pad_stage(fold, config)
            timing[f"fold{k}_pad_s"] = round(time.perf_counter() - t0, 3)

            t0 = time.perf_counter()
            sent_clf = train_sentence_classifier(fold, config)
            timing[f"fold{k}_sentence_clf_s"] = round(time.perf_counter() - t0, 3)

            pad_before = _snapshot(pad_clf.params_.as_dict())
            clf_before = _snapshot(sent_clf.params_.as_dict()) if sent_clf else None

            t0 = time.perf_counter()
            gen = train_lg_stage(fold, pad_clf.params_, sent_clf, config)
            timing[f"fold{k}_lg_s"] = round(time.perf_counter() - t0, 3)

            _assert_unchanged(pad_before, pad_clf.params_.as_dict(), "PAD")
            if sent_clf is not None:
                _assert_unchanged(clf_before, sent_clf.params_.as_dict(),
                                  "sentence classifier")

            save_pad(os.path.join(ckpt_dir, "pad.json"), pad_clf.params_)
            save_lg(os.path.join(ckpt_dir, "lg.json"), gen.params_, fold.vocab,
                    config.mode)
            if sent_clf is not None:
                save_sentence_classifier(
                    os.path.join(ckpt_dir, "sentence_classifier.json"),
                    sent_clf.params_, fold.vocab)

            report, audit = evaluate_fold(fold, pad_clf.params_, gen.params_,
                                          fold.vocab, config.mode, config.t_max)
            _write_text(os.path.join(fold_dir, "report.csv"), report_to_csv(report))
            _write_text(os.path.join(fold_dir, "report.txt"), report_to_text(report))
            _write_audit(os.path.join(fold_dir, "samples.jsonl"), audit)
            reports.append(report)

        summary = summarize_folds(reports)
        _write_text(os.path.join(out_dir, "summary.csv"), report_to_csv(summary))
        _write_text(os.path.join(out_dir, "summary.txt"), report_to_text(summary))
        manifest["status"] = "complete"
    except BaseException as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        _write_manifest(out_dir, manifest)
        raise
    _write_manifest(out_dir, manifest)
    return manifest


def load_manifest(run_dir: str) -> dict:
    path = os.path.join(run_dir, "run-manifest.json")
    if not os.path.exists(path):
        raise DataError(f"{run_dir} has no run-manifest.json; not a training run directory")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def evaluate_run(samples: Sequence[Sample], run_dir: str, out_dir: str) -> MetricsReport:
    """Re-evaluate a finished run's checkpoints against a dataset.

    The fold plan is rebuilt from the manifest seed; each fold's stored
    vocabulary must hash-match the vocabulary derived from that fold's
    training descriptions, else the evaluation refuses to run.
    """
    manifest = load_manifest(run_dir)
    config = TrainConfig(**manifest["config"])
    config.validate()
    plan = split_folds(samples, config.seed)
    pooled: list[tuple[int, dict[str, float]]] = []
    audit_all: list[dict] = []
    pad_rows: list[PadRow] = []
    for k, split in enumerate(plan.folds):
        fold = materialize_fold(samples, split, k, config.min_count)
        ckpt_dir = os.path.join(run_dir, f"fold-{k}", "checkpoints")
        pad_params = load_pad(os.path.join(ckpt_dir, "pad.json"))
        lg_params, vocab, meta = load_lg(os.path.join(ckpt_dir, "lg.json"),
                                         expected_vocab_hash=fold.vocab.sha256)
        records, audit, auc, err = _score_fold(fold, pad_params, lg_params, vocab,
                                               meta["mode"], config.t_max)
        pooled.extend(records)
        audit_all.extend(audit)
        pad_rows.append(PadRow(f"PAD fold-{k}", len(fold.test), auc, err))
    pad_rows.append(PadRow(
        "PAD mean",
        sum(p.n for p in pad_rows),
        float(np.mean([p.auc for p in pad_rows])),
        float(np.mean([p.eer for p in pad_rows])),
    ))
    rows = aggregate(pooled, [c.label for c in PA_CATEGORIES])
    report = MetricsReport(rows=rows, pad_rows=pad_rows)
    os.makedirs(out_dir, exist_ok=True)
    _write_text(os.path.join(out_dir, "report.csv"), report_to_csv(report))
    _write_text(os.path.join(out_dir, "report.txt"), report_to_text(report))
    _write_audit(os.path.join(out_dir, "samples.jsonl"), audit_all)
    return report
