"""Command-line front door.

Subcommands: gen-corpus, train, evaluate, generate, export-embeddings.
Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
The XPAD_SEED environment variable overrides the configured seed for
gen-corpus and train.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_lg, load_pad, load_sentence_classifier
from .corpus import (
    DataError,
    PadCategory,
    Sample,
    SynthConfig,
    category_counts,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
)
from .lg import build_conditioning, greedy_decode_batch
from .pad import pad_infer_batch
from .training import TrainConfig, evaluate_run, run_threefold
from .validation import ValidationError


def _env_seed() -> int | None:
    raw = os.environ.get("XPAD_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"XPAD_SEED must be an integer, got {raw!r}") from None


def _load_dataset(path: str) -> list[Sample]:
    samples = load_jsonl(path, feature_dim=None)
    if not samples:
        raise DataError(f"{path}: dataset is empty")
    dims = {s.features.shape[0] for s in samples}
    if len(dims) > 1:
        raise DataError(f"{path}: inconsistent feature lengths {sorted(dims)}")
    return samples


def _resolve_checkpoint_dir(root: str) -> str:
    """Accept either a checkpoints directory or a run directory (fold-0 default)."""
    if os.path.exists(os.path.join(root, "pad.json")):
        return root
    nested = os.path.join(root, "fold-0", "checkpoints")
    if os.path.exists(os.path.join(nested, "pad.json")):
        return nested
    raise DataError(
        f"{root}: no pad.json here or under fold-0/checkpoints/")


def _read_features_file(path: str, feature_dim: int) -> np.ndarray:
    """One vector per line: a JSON array, or whitespace/comma separated floats."""
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                if text.startswith("["):
                    vals = json.loads(text)
                    if not isinstance(vals, list):
                        raise ValueError("not an array")
                    vals = [float(v) for v in vals]
                else:
                    vals = [float(tok) for tok in text.replace(",", " ").split()]
            except (ValueError, json.JSONDecodeError):
                raise DataError(f"{path}:{lineno}: cannot parse feature vector") from None
            if len(vals) != feature_dim:
                raise DataError(
                    f"{path}:{lineno}: expected {feature_dim} values, got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no feature vectors found")
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = SynthConfig.from_json(args.config) if args.config else SynthConfig()
    seed = _env_seed()
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    samples = generate_synthetic(cfg)
    save_jsonl(samples, args.out)
    stats = {
        "total": len(samples),
        "counts": category_counts(samples),
        "num_subjects": cfg.num_subjects,
        "feature_dim": cfg.feature_dim,
        "separation": cfg.separation,
        "sigma": cfg.sigma,
        "seed": cfg.seed,
    }
    stats_path = args.out + ".stats.json"
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(samples)} samples to {args.out} (stats: {stats_path})")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.mode is not None:
        config.mode = args.mode
    seed = _env_seed()
    if seed is not None:
        config.seed = seed
    config.validate()
    samples = _load_dataset(args.data)
    manifest = run_threefold(samples, config, args.out, data_path=args.data)
    print(f"run complete: {args.out} (mode {config.mode}, seed {config.seed})")
    print(f"summary: {os.path.join(args.out, 'summary.csv')}")
    return 0 if manifest["status"] == "complete" else 1


def cmd_evaluate(args: argparse.Namespace) -> int:
    samples = _load_dataset(args.data)
    report = evaluate_run(samples, args.checkpoints, args.out)
    print(f"evaluated {sum(r.n for r in report.rows[:1])} attack samples "
          f"across {len(report.pad_rows) - 1} folds")
    print(f"report: {os.path.join(args.out, 'report.csv')}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    ckpt = _resolve_checkpoint_dir(args.checkpoints)
    pad_params = load_pad(os.path.join(ckpt, "pad.json"))
    lg_params, vocab, meta = load_lg(os.path.join(ckpt, "lg.json"))
    x = _read_features_file(args.features_file, pad_params.feature_dim)
    probs, _ = pad_infer_batch(x, pad_params)
    scores = 1.0 - probs[:, 0]
    categories = probs.argmax(axis=1)
    pa_idx = np.flatnonzero(categories != PadCategory.BONA_FIDE)
    sentences = {}
    if pa_idx.size:
        mode = meta["mode"]
        cond = build_conditioning(x[pa_idx], probs[pa_idx] if mode == "C" else None, mode)
        for i, g in zip(pa_idx, greedy_decode_batch(cond, lg_params, meta.get("t_max", 30))):
            sentences[int(i)] = " ".join(g.words(vocab))
    for i in range(x.shape[0]):
        label = PadCategory(int(categories[i])).label
        line = f"{label}\tpa_score={scores[i]:.6f}"
        if i in sentences:
            line += f"\t{sentences[i]}"
        print(line)
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    ckpt = _resolve_checkpoint_dir(args.checkpoints)
    clf_path = os.path.join(ckpt, "sentence_classifier.json")
    if not os.path.exists(clf_path):
        raise DataError(
            f"{ckpt}: no sentence_classifier.json; train with the sentence "
            "losses enabled to obtain an embedder")
    params, vocab = load_sentence_classifier(clf_path)
    samples = _load_dataset(args.data)
    table = params.embed.data
    rows = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        dim = table.shape[1]
        fh.write("sample_id,category," + ",".join(f"e{j}" for j in range(dim)) + "\n")
        for s in samples:
            if s.category == PadCategory.BONA_FIDE:
                continue
            for d in s.descriptions:
                ids = vocab.encode_text(d)
                if not ids:
                    raise DataError(f"sample {s.sample_id}: empty description")
                emb = table[ids].mean(axis=0)
                fh.write(f"{s.sample_id},{PadCategory(s.category).slug},"
                         + ",".join(f"{v:.10g}" for v in emb) + "\n")
                rows += 1
    print(f"wrote {rows} description embeddings to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xpad",
        description="Explainable presentation-attack detection laboratory.")
    parser.add_argument("--version", action="version", version=f"xpad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON generation config (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output JSON Lines path")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="run three-fold training")
    p.add_argument("--data", required=True, help="dataset JSON Lines path")
    p.add_argument("--config", help="JSON training config (defaults used if omitted)")
    p.add_argument("--mode", choices=("A", "C"), help="conditioning mode override")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate a run's checkpoints")
    p.add_argument("--data", required=True, help="dataset JSON Lines path")
    p.add_argument("--checkpoints", required=True, help="training run directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="describe feature vectors from a file")
    p.add_argument("--features-file", required=True,
                   help="one vector per line: JSON array or separated floats")
    p.add_argument("--checkpoints", required=True,
                   help="checkpoints directory or run directory (uses fold-0)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("export-embeddings",
                       help="CSV of sentence embeddings for all attack descriptions")
    p.add_argument("--data", required=True, help="dataset JSON Lines path")
    p.add_argument("--checkpoints", required=True,
                   help="checkpoints directory or run directory (uses fold-0)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DataError, ValidationError, CheckpointError, FileNotFoundError,
            IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
