"""Explainable presentation-attack detection on synthetic face features.

A small laboratory for training a PAD classifier together with an LSTM
that narrates its decisions in natural language.  Everything runs on
numpy float64 through a reverse-mode tape; no GPU framework involved.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, AutodiffError, ShapeError
from .corpus import (
    DataError,
    PadCategory,
    Sample,
    SynthConfig,
    Vocabulary,
    build_vocab,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    split_folds,
    tokenize,
)
from .pad import PadClassifier, eer, roc_auc
from .lg import ExplanationGenerator, build_conditioning
from .losses import LossWeights, SentenceClassifier
from .metrics import bleu_n, meteor_lite, rouge_l, score_sentence
from .checkpoint import CheckpointError, VocabularyMismatchError

__all__ = [
    "__version__",
    "Tape",
    "Tensor",
    "AutodiffError",
    "ShapeError",
    "DataError",
    "PadCategory",
    "Sample",
    "SynthConfig",
    "Vocabulary",
    "build_vocab",
    "generate_synthetic",
    "load_jsonl",
    "save_jsonl",
    "split_folds",
    "tokenize",
    "PadClassifier",
    "eer",
    "roc_auc",
    "ExplanationGenerator",
    "build_conditioning",
    "LossWeights",
    "SentenceClassifier",
    "bleu_n",
    "meteor_lite",
    "rouge_l",
    "score_sentence",
    "CheckpointError",
    "VocabularyMismatchError",
]
