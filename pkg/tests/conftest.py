"""Shared fixtures: a small fast corpus and one trained run per session."""

import json
import os

import pytest

from xpad.cli import main as cli_main
from xpad.corpus import PadCategory, SynthConfig, generate_synthetic, save_jsonl

TINY_COUNTS = {cat.slug: (30 if cat == PadCategory.BONA_FIDE else 6)
               for cat in PadCategory}

TINY_TRAIN = {
    "mode": "C",
    "seed": 5,
    "batch_size": 16,
    "learning_rate": 1.5e-3,
    "dropout": 0.3,
    "t_max": 12,
    "hidden_size": 32,
    "embed_size": 24,
    "lg_hidden_size": 20,
    "pad_max_epochs": 25,
    "pad_patience": 15,
    "clf_max_epochs": 20,
    "clf_patience": 10,
    "lg_max_epochs": 6,
    "lg_patience": 10,
}


def tiny_synth_config(**overrides):
    base = dict(counts=dict(TINY_COUNTS), separation=3.0, sigma=0.5,
                num_subjects=9, feature_dim=16, seed=11)
    base.update(overrides)
    return SynthConfig(**base)


def tiny_train_dict(**overrides):
    cfg = dict(TINY_TRAIN)
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="session")
def tiny_corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.jsonl"
    save_jsonl(generate_synthetic(tiny_synth_config()), str(path))
    return str(path)


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus_path, tmp_path_factory):
    """CLI-trained three-fold run on the tiny corpus, shared read-only."""
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(tiny_train_dict()) + "\n")
    out = root / "run-a"
    saved = os.environ.pop("XPAD_SEED", None)
    try:
        rc = cli_main(["train", "--data", tiny_corpus_path,
                       "--config", str(cfg_path), "--out", str(out)])
    finally:
        if saved is not None:
            os.environ["XPAD_SEED"] = saved
    assert rc == 0
    return {"dir": str(out), "data": tiny_corpus_path, "config": str(cfg_path)}
