"""Dataset layer: categories, samples, vocabulary, synthetic corpus, folds.

The on-disk dataset is JSON Lines; every record carries sample_id,
subject_id, an integer category (0 = bona fide), a fixed-length feature
vector, and up to five free-text descriptions (attack samples only).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    pass


class PadCategory(IntEnum):
    BONA_FIDE = 0
    FUNNY_GLASSES = 1
    PRINTED_PAPER = 2
    MANNEQUIN = 3
    OPAQUE_MASK = 4
    PLASTIC_MASK = 5
    MAKEUP = 6
    SILICONE_MASK = 7
    PAPER_GLASSES = 8
    TATTOO = 9

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", " ")

    @property
    def slug(self) -> str:
        return self.name.lower()


N_CATEGORIES = len(PadCategory)
PA_CATEGORIES = tuple(c for c in PadCategory if c != PadCategory.BONA_FIDE)

# Half-width of the attack-direction cone, as a fraction of the axis length.
PA_CONE = 0.6

# Quarter-scale class sizes keeping the published corpus proportions.
DEFAULT_COUNTS = {
    PadCategory.BONA_FIDE.slug: 276,
    PadCategory.FUNNY_GLASSES.slug: 35,
    PadCategory.PRINTED_PAPER.slug: 14,
    PadCategory.MANNEQUIN.slug: 18,
    PadCategory.OPAQUE_MASK.slug: 7,
    PadCategory.PLASTIC_MASK.slug: 58,
    PadCategory.MAKEUP.slug: 51,
    PadCategory.SILICONE_MASK.slug: 8,
    PadCategory.PAPER_GLASSES.slug: 16,
    PadCategory.TATTOO.slug: 23,
}

DESCRIPTIONS_PER_PA = 5

# Each attack category speaks with its own sentence frame; templates inside
# a category differ by one slot word. Lexical overlap across categories is
# limited to what the instruments naturally share (mask, glasses, paper).
TEMPLATES: dict[PadCategory, tuple[str, ...]] = {
    PadCategory.FUNNY_GLASSES: (
        "oversized funny glasses with a joke nose",
        "oversized funny glasses with a clown nose",
        "oversized funny glasses with a rubber nose",
        "oversized funny glasses with a foam nose",
        "oversized funny glasses with a crooked nose",
    ),
    PadCategory.PRINTED_PAPER: (
        "a matte printed paper photo held upright",
        "a glossy printed paper photo held upright",
        "a curled printed paper photo held upright",
        "a creased printed paper photo held upright",
    ),
    PadCategory.MANNEQUIN: (
        "rigid mannequin head turned toward camera lens",
        "rigid mannequin head tilted toward camera lens",
        "rigid mannequin head angled toward camera lens",
        "rigid mannequin head aimed toward camera lens",
    ),
    PadCategory.OPAQUE_MASK: (
        "an opaque mask without any eye openings",
        "an opaque mask without any eye holes",
        "an opaque mask without any eye slits",
        "an opaque mask without any eye gaps",
    ),
    PadCategory.PLASTIC_MASK: (
        "a plastic mask covers the face",
        "a shiny plastic mask covers the face",
        "a smooth plastic mask covers the face",
        "a clear plastic mask covers the face",
        "a hard plastic mask covers the face",
    ),
    PadCategory.MAKEUP: (
        "theatrical makeup paint over both cheeks",
        "theatrical makeup paint along both cheeks",
        "theatrical makeup paint down both cheeks",
        "theatrical makeup paint past both cheeks",
    ),
    PadCategory.SILICONE_MASK: (
        "full silicone mask with lifelike skin texture",
        "full silicone mask with realistic skin texture",
        "full silicone mask with soft skin texture",
        "full silicone mask with supple skin texture",
    ),
    PadCategory.PAPER_GLASSES: (
        "flat glasses cut from white paper sheets",
        "flat glasses cut from plain paper sheets",
        "flat glasses cut from thin paper sheets",
        "flat glasses cut from folded paper sheets",
    ),
    PadCategory.TATTOO: (
        "dense tattoo ink drawn across the jaw",
        "dense tattoo ink drawn across the chin",
        "dense tattoo ink drawn across the temple",
        "dense tattoo ink drawn across the brow",
    ),
}


@dataclass
class Sample:
    sample_id: str
    subject_id: str
    category: int
    features: np.ndarray
    descriptions: list[str] = field(default_factory=list)

    def validate(self, feature_dim: int | None = None) -> None:
        if not 0 <= self.category < N_CATEGORIES:
            raise DataError(
                f"sample {self.sample_id}: category {self.category} outside 0..{N_CATEGORIES - 1}"
            )
        if feature_dim is not None and self.features.shape != (feature_dim,):
            raise DataError(
                f"sample {self.sample_id}: feature length {self.features.shape[0]} "
                f"!= expected {feature_dim}"
            )
        if len(self.descriptions) > DESCRIPTIONS_PER_PA:
            raise DataError(
                f"sample {self.sample_id}: {len(self.descriptions)} descriptions exceed "
                f"the maximum of {DESCRIPTIONS_PER_PA}"
            )
        if self.category == PadCategory.BONA_FIDE and self.descriptions:
            raise DataError(f"sample {self.sample_id}: bona-fide samples carry no descriptions")
        if self.category != PadCategory.BONA_FIDE and not self.descriptions:
            raise DataError(f"sample {self.sample_id}: attack samples need at least one description")


# ---------------------------------------------------------------------------
# tokenization and vocabulary

_PUNCT_TABLE = str.maketrans("", "", ".,!?;:\"'()")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop .,!?;:"'() and split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Dense token ids with the four reserved entries at 0..3."""

    def __init__(self, words: Sequence[str]):
        for w in words:
            if w in RESERVED_TOKENS:
                raise DataError(f"word list may not contain reserved token {w!r}")
        self.tokens: tuple[str, ...] = RESERVED_TOKENS + tuple(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def sha256(self) -> str:
        return hashlib.sha256("\x00".join(self.tokens).encode()).hexdigest()


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Vocabulary over training descriptions only.

    Words with frequency >= min_count enter, ordered by descending
    frequency then lexicographically, after the reserved ids.
    """
    freq: dict[str, int] = {}
    for text in corpus:
        for tok in tokenize(text):
            freq[tok] = freq.get(tok, 0) + 1
    kept = sorted((w for w, c in freq.items() if c >= min_count),
                  key=lambda w: (-freq[w], w))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass
class SynthConfig:
    counts: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    separation: float = 3.0
    sigma: float = 0.6
    num_subjects: int = 30
    feature_dim: int = 128
    seed: int = 0

    def validate(self) -> None:
        for slug, n in self.counts.items():
            try:
                PadCategory[slug.upper()]
            except KeyError:
                raise DataError(f"unknown category {slug!r} in counts") from None
            if n < 0:
                raise DataError(f"count for {slug} must be non-negative, got {n}")
        if sum(self.counts.values()) <= 0:
            raise DataError("total sample count must be positive")
        if self.num_subjects < 9:
            raise DataError(
                f"num_subjects must be >= 9 for a feasible 3-fold protocol, got {self.num_subjects}"
            )
        if self.sigma < 0:
            raise DataError(f"sigma must be non-negative, got {self.sigma}")
        if self.feature_dim < N_CATEGORIES + 1:
            # the category directions are built from an orthonormal basis
            raise DataError(
                f"feature_dim must be >= {N_CATEGORIES + 1}, got {self.feature_dim}")

    @classmethod
    def from_json(cls, path: str) -> "SynthConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {"counts", "separation", "sigma", "num_subjects", "feature_dim", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


def generate_synthetic(config: SynthConfig, seed: int | None = None) -> list[Sample]:
    """Draw a labelled corpus from per-category Gaussians.

    Each category mean is a unique unit direction scaled by
    config.separation with isotropic noise config.sigma; attack samples get
    five template descriptions. Deterministic given (config, seed).
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.feature_dim
    # Bona fide sits orthogonal to a common attack axis; attack categories
    # spread in a narrow cone (radius PA_CONE) around that axis. Detection
    # distance stays separation*sqrt(2) while attack types overlap heavily,
    # as generic appearance features do for visually similar instruments.
    basis = np.linalg.qr(rng.standard_normal((d, N_CATEGORIES + 1)))[0].T
    bona, axis, offsets = basis[0], basis[1], basis[2:]
    directions = np.concatenate([bona[None, :], axis + PA_CONE * offsets])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    samples: list[Sample] = []
    idx = 0
    for cat in PadCategory:
        n = config.counts.get(cat.slug, 0)
        mean = directions[cat] * config.separation
        for _ in range(n):
            features = mean + config.sigma * rng.standard_normal(d)
            descriptions: list[str] = []
            if cat != PadCategory.BONA_FIDE:
                templates = TEMPLATES[cat]
                picks = rng.integers(0, len(templates), size=DESCRIPTIONS_PER_PA)
                descriptions = [templates[p] for p in picks]
            samples.append(Sample(
                sample_id=f"s{idx:04d}",
                subject_id=f"subj{idx % config.num_subjects:03d}",
                category=int(cat),
                features=features,
                descriptions=descriptions,
            ))
            idx += 1
    return samples


# ---------------------------------------------------------------------------
# subject-disjoint folds

@dataclass
class FoldSplit:
    """Subject ids making up one fold's three disjoint parts."""
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class FoldPlan:
    folds: list[FoldSplit]
    seed: int


N_FOLDS = 3
VAL_FRACTION = 0.15


def split_folds(samples: Sequence[Sample], seed: int) -> FoldPlan:
    """Split subjects into 3 test sets balanced by sample count.

    Subjects are shuffled by seed and greedily assigned to the currently
    smallest test set. Fold k tests on set k and trains on the rest,
    with ceil(15%) (at least one) of the training subjects held out for
    validation. No subject ever straddles two parts.
    """
    by_subject: dict[str, list[Sample]] = {}
    for s in samples:
        by_subject.setdefault(s.subject_id, []).append(s)
    subjects = sorted(by_subject)
    if len(subjects) < N_FOLDS:
        raise DataError(f"need at least {N_FOLDS} distinct subjects, got {len(subjects)}")

    rng = np.random.default_rng(seed)
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    set_sizes = [0] * N_FOLDS
    assignment: dict[str, int] = {}
    for subj in shuffled:
        k = min(range(N_FOLDS), key=lambda i: (set_sizes[i], i))
        assignment[subj] = k
        set_sizes[k] += len(by_subject[subj])

    folds: list[FoldSplit] = []
    for k in range(N_FOLDS):
        non_test = [s for s in shuffled if assignment[s] != k]
        n_val = max(1, math.ceil(VAL_FRACTION * len(non_test)))
        folds.append(FoldSplit(
            train=non_test[:-n_val],
            val=non_test[-n_val:],
            test=[s for s in shuffled if assignment[s] == k],
        ))
    return FoldPlan(folds=folds, seed=seed)


def index_samples(samples: Sequence[Sample]) -> dict[str, Sample]:
    out: dict[str, Sample] = {}
    for s in samples:
        if s.sample_id in out:
            raise DataError(f"duplicate sample_id {s.sample_id}")
        out[s.sample_id] = s
    return out


# ---------------------------------------------------------------------------
# JSONL round trip

def save_jsonl(samples: Sequence[Sample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "sample_id": s.sample_id,
                "subject_id": s.subject_id,
                "category": int(s.category),
                "features": [float(v) for v in s.features],
                "descriptions": list(s.descriptions),
            }) + "\n")


def load_jsonl(path: str, feature_dim: int = 128) -> list[Sample]:
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            missing = {"sample_id", "subject_id", "category", "features", "descriptions"} - set(raw)
            if missing:
                raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            if not isinstance(raw["category"], int):
                raise DataError(f"{path}:{lineno}: category must be an integer")
            descriptions = raw["descriptions"]
            if not isinstance(descriptions, list) or any(not isinstance(t, str) for t in descriptions):
                raise DataError(f"{path}:{lineno}: descriptions must be a list of strings")
            try:
                features = np.asarray(raw["features"], dtype=np.float64)
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: features must be a list of numbers") from None
            if features.ndim != 1:
                raise DataError(f"{path}:{lineno}: features must be a flat list")
            sample = Sample(
                sample_id=str(raw["sample_id"]),
                subject_id=str(raw["subject_id"]),
                category=raw["category"],
                features=features,
                descriptions=descriptions,
            )
            sample.validate(feature_dim=feature_dim)
            samples.append(sample)
    index_samples(samples)  # rejects duplicate ids
    return samples


def category_counts(samples: Sequence[Sample]) -> dict[str, int]:
    counts = {cat.slug: 0 for cat in PadCategory}
    for s in samples:
        counts[PadCategory(s.category).slug] += 1
    return counts


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
