"""Sentence-level text metrics and the per-category evaluation report.

All three metrics score one tokenized hypothesis against 1..5 tokenized
references:

* BLEU-n: clipped modified n-gram precision (clip = max count over the
  references), geometric mean over orders, brevity penalty exp(1 - r/c)
  with r the closest reference length (ties toward the shorter one). No
  smoothing - a zero precision zeroes the score - but orders longer than
  the hypothesis are skipped so an exact match scores 1.0 at every n.
* METEOR-lite: two-stage unigram alignment (exact matches take priority,
  then synonym matches), F = 10PR/(R+9P), fragmentation penalty
  0.5*(chunks/m)^3, best reference wins.
* ROUGE-L: F1 over the longest common subsequence, best reference wins.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

Tokens = Sequence[str]

METRIC_KEYS = ("bleu1", "bleu2", "bleu3", "meteor", "rouge")


def _check_refs(references: Sequence[Tokens]) -> None:
    if not 1 <= len(references) <= 5:
        raise ValueError(f"need 1..5 references, got {len(references)}")
    for i, ref in enumerate(references):
        if len(ref) == 0:
            raise ValueError(f"reference {i} is empty")


# ---------------------------------------------------------------------------
# BLEU

def _ngrams(tokens: Tokens, k: int) -> Counter:
    return Counter(tuple(tokens[i:i + k]) for i in range(len(tokens) - k + 1))


def bleu_n(hypothesis: Tokens, references: Sequence[Tokens], n: int) -> float:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    _check_refs(references)
    c = len(hypothesis)
    if c == 0:
        return 0.0
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    log_p_sum = 0.0
    orders = 0
    for k in range(1, min(n, c) + 1):
        hyp_counts = _ngrams(hypothesis, k)
        clip: Counter = Counter()
        for ref in references:
            ref_counts = _ngrams(ref, k)
            for g, cnt in ref_counts.items():
                if cnt > clip[g]:
                    clip[g] = cnt
        matched = sum(min(cnt, clip[g]) for g, cnt in hyp_counts.items())
        if matched == 0:
            return 0.0
        log_p_sum += math.log(matched / (c - k + 1))
        orders += 1
    return bp * math.exp(log_p_sum / orders)


# ---------------------------------------------------------------------------
# METEOR-lite

def _synonymous(a: str, b: str, table: Mapping[str, Sequence[str]]) -> bool:
    return b in table.get(a, ()) or a in table.get(b, ())


def _chunk_count(pairs: Sequence[tuple[int, int]]) -> int:
    """pairs sorted by hypothesis position; counts runs contiguous in both."""
    chunks = 0
    prev = None
    for h, r in pairs:
        if prev is None or h != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (h, r)
    return chunks


def _max_bipartite(candidates: Sequence[Sequence[int]], n_right: int) -> int:
    """Augmenting-path maximum matching size; candidates[i] lists right nodes."""
    match_right = [-1] * n_right

    def try_assign(i: int, seen: list[bool]) -> bool:
        for j in candidates[i]:
            if not seen[j]:
                seen[j] = True
                if match_right[j] == -1 or try_assign(match_right[j], seen):
                    match_right[j] = i
                    return True
        return False

    size = 0
    for i in range(len(candidates)):
        if try_assign(i, [False] * n_right):
            size += 1
    return size


def _align(hyp: Tokens, ref: Tokens, table: Mapping[str, Sequence[str]]) -> tuple[int, int]:
    """Best two-stage alignment: returns (m, chunks).

    Exact matches are maximized first, synonym matches on the remainder
    second; among all such maximum alignments the chunk count is
    minimized by depth-first search over hypothesis positions (chunk
    count only grows along a branch, so the best bound prunes hard).
    """
    h_counts = Counter(hyp)
    r_counts = Counter(ref)
    m_exact = sum(min(c, r_counts[w]) for w, c in h_counts.items())

    # synonym-stage capacity per type: leftover counts after exact matching
    h_left = {w: c - min(c, r_counts.get(w, 0)) for w, c in h_counts.items()}
    r_left = {w: c - min(c, h_counts.get(w, 0)) for w, c in r_counts.items()}
    left_words = [w for w, c in h_left.items() for _ in range(c)]
    right_words = [w for w, c in r_left.items() for _ in range(c)]
    cand = [[j for j, rw in enumerate(right_words) if _synonymous(hw, rw, table)]
            for hw in left_words]
    m_syn = _max_bipartite(cand, len(right_words))
    m_total = m_exact + m_syn
    if m_total == 0:
        return 0, 0

    exact_cand = [[j for j, rw in enumerate(ref) if rw == hw] for hw in hyp]
    syn_cand = [[j for j, rw in enumerate(ref)
                 if rw != hw and _synonymous(hw, rw, table)] for hw in hyp]

    best = [len(hyp) + 1]
    used = [False] * len(ref)

    def dfs(i: int, m_e: int, m_s: int, chunks: int, prev: tuple[int, int] | None) -> None:
        if chunks >= best[0]:
            return
        remaining = len(hyp) - i
        # even matching every remaining position cannot reach the targets
        if m_e + remaining < m_exact or m_e + m_s + remaining < m_total:
            return
        if i == len(hyp):
            if m_e == m_exact and m_e + m_s == m_total:
                best[0] = chunks
            return
        for exact, cands in ((True, exact_cand[i]), (False, syn_cand[i])):
            for j in cands:
                if used[j]:
                    continue
                used[j] = True
                new_chunk = prev is None or i != prev[0] + 1 or j != prev[1] + 1
                dfs(i + 1,
                    m_e + (1 if exact else 0),
                    m_s + (0 if exact else 1),
                    chunks + (1 if new_chunk else 0),
                    (i, j))
                used[j] = False
        dfs(i + 1, m_e, m_s, chunks, prev)

    dfs(0, 0, 0, 0, None)
    return m_total, best[0]


def meteor_lite(hypothesis: Tokens, references: Sequence[Tokens],
                synonyms: Mapping[str, Sequence[str]] | None = None) -> float:
    _check_refs(references)
    if len(hypothesis) == 0:
        return 0.0
    table = synonyms or {}
    best = 0.0
    for ref in references:
        m, chunks = _align(hypothesis, ref, table)
        if m == 0:
            continue
        p = m / len(hypothesis)
        r = m / len(ref)
        f = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, f * (1.0 - penalty))
    return best


# ---------------------------------------------------------------------------
# ROUGE-L

def _lcs_len(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Tokens, references: Sequence[Tokens]) -> float:
    _check_refs(references)
    if len(hypothesis) == 0:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = _lcs_len(hypothesis, ref)
        if lcs == 0:
            continue
        p = lcs / len(hypothesis)
        r = lcs / len(ref)
        best = max(best, 2.0 * p * r / (p + r))
    return best


def score_sentence(hypothesis: Tokens, references: Sequence[Tokens],
                   synonyms: Mapping[str, Sequence[str]] | None = None) -> dict[str, float]:
    return {
        "bleu1": bleu_n(hypothesis, references, 1),
        "bleu2": bleu_n(hypothesis, references, 2),
        "bleu3": bleu_n(hypothesis, references, 3),
        "meteor": meteor_lite(hypothesis, references, synonyms),
        "rouge": rouge_l(hypothesis, references),
    }


def load_synonyms(path: str) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or any(
            not isinstance(v, list) or any(not isinstance(w, str) for w in v)
            for v in raw.values()):
        raise ValueError(f"{path}: synonym table must map word -> list of words")
    return raw


# ---------------------------------------------------------------------------
# aggregation / report

ALL_PAS = "All PAs"


@dataclass
class MetricRow:
    label: str
    n: int
    means: dict[str, float] | None
    stds: dict[str, float] | None


@dataclass
class PadRow:
    label: str          # "PAD" for a single fold, "PAD fold-k" / "PAD mean" pooled
    n: int
    auc: float
    eer: float


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    pad_rows: list[PadRow]


def aggregate(records: Sequence[tuple[int, dict[str, float]]],
              category_labels: Sequence[str]) -> list[MetricRow]:
    """Mean +/- population std per metric, All-PAs row first.

    records pair an attack-category index (1-based over category_labels)
    with one sample's metric dict; the All-PAs row aggregates over the
    samples themselves, not over category means.
    """
    def row(label: str, scores: list[dict[str, float]]) -> MetricRow:
        if not scores:
            return MetricRow(label=label, n=0, means=None, stds=None)
        means = {}
        stds = {}
        for key in METRIC_KEYS:
            vals = np.array([s[key] for s in scores])
            means[key] = float(vals.mean())
            stds[key] = float(vals.std())  # population std
        return MetricRow(label=label, n=len(scores), means=means, stds=stds)

    rows = [row(ALL_PAS, [s for _, s in records])]
    for i, label in enumerate(category_labels, start=1):
        rows.append(row(label, [s for cat, s in records if cat == i]))
    return rows


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


CSV_HEADER = ("row,n_samples,"
              + ",".join(f"{k}_mean,{k}_std" for k in METRIC_KEYS)
              + ",auc,eer")


def report_to_csv(report: MetricsReport) -> str:
    lines = [CSV_HEADER]
    for row in report.rows:
        cells = [row.label, str(row.n)]
        for key in METRIC_KEYS:
            cells.append(_fmt(row.means[key] if row.means else None))
            cells.append(_fmt(row.stds[key] if row.stds else None))
        cells += ["", ""]
        lines.append(",".join(cells))
    for pad in report.pad_rows:
        cells = [pad.label, str(pad.n)]
        cells += [""] * (2 * len(METRIC_KEYS))
        cells += [_fmt(pad.auc), _fmt(pad.eer)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def report_to_text(report: MetricsReport) -> str:
    """Fixed-width table with m+-s cells, two decimals."""
    headers = ["category", "n"] + [k.upper() for k in METRIC_KEYS]
    body: list[list[str]] = []
    for row in report.rows:
        cells = [row.label, str(row.n)]
        for key in METRIC_KEYS:
            if row.means is None:
                cells.append("-")
            else:
                cells.append(f"{row.means[key]:.2f}±{row.stds[key]:.2f}")
        body.append(cells)
    widths = [max(len(headers[i]), *(len(r[i]) for r in body)) for i in range(len(headers))]
    out = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for r in body:
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    if report.pad_rows:
        out.append("")
        for pad in report.pad_rows:
            out.append(f"{pad.label}: AUC {pad.auc:.4f}  EER {pad.eer:.4f}  (n={pad.n})")
    return "\n".join(out) + "\n"
