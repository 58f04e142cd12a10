"""Loss terms, the sentence embedder/classifier, and the synonym fixture."""

import math

import numpy as np
import pytest

from xpad import autodiff as ad
from xpad.autodiff import Tape, Tensor
from xpad.corpus import PadCategory, TEMPLATES, build_vocab
from xpad.lg import init_lg_params, soft_decode_batch
from xpad.losses import (
    DEFAULT_SYNONYMS,
    LossWeights,
    MeanEmbedder,
    N_PA_CATEGORIES,
    SentenceClassifier,
    embed_sentence,
    save_synonym_table,
    sentence_discriminative_loss,
    sentence_losses_batch,
    sentence_semantic_loss,
    total_loss,
    word_wise_loss,
)
from xpad.metrics import load_synonyms
from xpad.validation import ValidationError


# ---------------------------------------------------------------------------
# word-wise loss

def test_word_wise_loss_sums_per_position_cross_entropy():
    rng = np.random.default_rng(0)
    tape = Tape()
    rows = [Tensor(rng.standard_normal(7), requires_grad=True) for _ in range(4)]
    ref = [2, 0, 6, 3]
    total = word_wise_loss(tape, rows, ref)
    expected = sum(ad.softmax_xent(Tape(), Tensor(r.data.copy()), t).item()
                   for r, t in zip(rows, ref))
    assert abs(total.item() - expected) < 1e-12


def test_word_wise_loss_validation():
    tape = Tape()
    row = Tensor(np.zeros(5))
    with pytest.raises(ValidationError, match="1 logit rows vs 2"):
        word_wise_loss(tape, [row], [1, 2])
    with pytest.raises(ValidationError, match="at least one position"):
        word_wise_loss(tape, [], [])


# ---------------------------------------------------------------------------
# sentence-semantic loss

def test_sentence_semantic_loss_is_negative_cosine():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = Tensor(rng.standard_normal(6))
        b = Tensor(rng.standard_normal(6))
        tape = Tape()
        loss = sentence_semantic_loss(tape, a, b).item()
        cos = float(a.data @ b.data / (np.linalg.norm(a.data) * np.linalg.norm(b.data)))
        assert abs(loss + cos) < 1e-12
        assert -1.0 - 1e-12 <= loss <= 1.0 + 1e-12


def test_sentence_semantic_loss_edge_cases():
    tape = Tape()
    v = Tensor(np.array([1.0, 2.0, 3.0]))
    scaled = Tensor(np.array([2.0, 4.0, 6.0]))
    assert abs(sentence_semantic_loss(tape, v, scaled).item() + 1.0) < 1e-12
    flipped = Tensor(-v.data)
    assert abs(sentence_semantic_loss(tape, v, flipped).item() - 1.0) < 1e-12
    zero = Tensor(np.zeros(3))
    assert sentence_semantic_loss(tape, v, zero).item() == 0.0


# ---------------------------------------------------------------------------
# combined loss

def test_total_loss_combines_weighted_terms():
    tape = Tape()
    mk = lambda v: Tensor(np.asarray(v))
    w = LossWeights(omega1=0.7, omega2=1.3, lambda_ww=1.0, lambda_disc=0.2, lambda_ss=0.5)
    out = total_loss(tape, w, l_pad=mk(2.0), l_ww=mk(3.0), l_disc=mk(5.0), l_ss=mk(-0.4))
    expected = 0.7 * 2.0 + 1.3 * (1.0 * 3.0 + 0.2 * 5.0 + 0.5 * -0.4)
    assert abs(out.item() - expected) < 1e-12

    only_ww = total_loss(tape, w, l_ww=mk(3.0))
    assert abs(only_ww.item() - 1.3 * 3.0) < 1e-12

    with pytest.raises(ValidationError, match="at least one term"):
        total_loss(tape, w)


# ---------------------------------------------------------------------------
# mean embedder

def test_embed_tokens_is_row_mean():
    rng = np.random.default_rng(2)
    table = Tensor(rng.standard_normal((8, 5)))
    emb = MeanEmbedder(table)
    tape = Tape()
    out = emb.embed_tokens(tape, [2, 5, 2])
    np.testing.assert_allclose(out.data, table.data[[2, 5, 2]].mean(axis=0), atol=1e-15)
    assert embed_sentence(Tape(), [2, 5, 2], emb).shape == (5,)
    with pytest.raises(ValidationError, match="empty sentence"):
        emb.embed_tokens(Tape(), [])


def test_embed_tokens_batch_respects_mask():
    rng = np.random.default_rng(3)
    table = Tensor(rng.standard_normal((6, 4)))
    emb = MeanEmbedder(table)
    padded = np.array([[2, 3, 0], [4, 5, 1]])
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    tape = Tape()
    out = emb.embed_tokens_batch(tape, padded, mask)
    np.testing.assert_allclose(out.data[0], table.data[[2, 3]].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(out.data[1], table.data[[4, 5, 1]].mean(axis=0), atol=1e-15)


def test_embed_soft_rows_interpolate_the_table():
    rng = np.random.default_rng(4)
    table = Tensor(rng.standard_normal((5, 3)))
    emb = MeanEmbedder(table)
    tape = Tape()
    uniform = Tensor(np.full((1, 5), 0.2))
    out = emb.embed_soft_batch(tape, [uniform], np.ones((1, 1)))
    np.testing.assert_allclose(out.data[0], table.data.mean(axis=0), atol=1e-15)
    one_hot = Tensor(np.eye(5)[[3]])
    out = emb.embed_soft_batch(tape, [one_hot], np.ones((1, 1)))
    np.testing.assert_allclose(out.data[0], table.data[3], atol=1e-15)


# ---------------------------------------------------------------------------
# sentence classifier

def _template_data():
    texts = {cat: list(TEMPLATES[cat]) for cat in PadCategory if cat != PadCategory.BONA_FIDE}
    vocab = build_vocab(t for ts in texts.values() for t in ts)
    train_seqs, train_y, test_seqs, test_y = [], [], [], []
    for cat, ts in texts.items():
        encoded = [vocab.encode_text(t) for t in ts]
        train_seqs += encoded[:-1]
        train_y += [int(cat)] * (len(ts) - 1)
        test_seqs.append(encoded[-1])
        test_y.append(int(cat))
    return vocab, train_seqs, np.array(train_y), test_seqs, np.array(test_y)


def test_sentence_classifier_separates_attack_templates():
    vocab, train_seqs, train_y, test_seqs, test_y = _template_data()
    clf = SentenceClassifier(embed_size=16, learning_rate=5e-3, max_epochs=60, seed=0)
    clf.fit(train_seqs, train_y, vocab_size=len(vocab))
    acc = float((clf.predict(test_seqs) == test_y).mean())
    assert acc >= 0.95
    probs = clf.predict_proba(test_seqs)
    assert probs.shape == (9, N_PA_CATEGORIES)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert clf.vocab_size_ == len(vocab)


def test_sentence_classifier_label_validation():
    with pytest.raises(ValidationError, match="attack categories in 1..9"):
        SentenceClassifier(max_epochs=1).fit([[4]], [0], vocab_size=6)
    with pytest.raises(ValidationError, match=r"must have shape \(2,\)"):
        SentenceClassifier(max_epochs=1).fit([[4], [5]], [1], vocab_size=6)
    with pytest.raises(ValidationError, match="non-empty"):
        SentenceClassifier(max_epochs=1).fit([[]], [1], vocab_size=6)
    with pytest.raises(ValidationError, match="not fitted"):
        SentenceClassifier().predict([[4]])


def test_sentence_classifier_freeze_and_embedder_share_state():
    clf = SentenceClassifier(embed_size=8, max_epochs=2, seed=1)
    clf.fit([[4, 5], [5, 4], [4]], [1, 2, 3], vocab_size=6)
    before = clf.predict_proba([[4, 5]])
    assert clf.freeze() is clf
    assert clf.params_.frozen
    assert all(not t.requires_grad for t in clf.params_.as_dict().values())
    np.testing.assert_array_equal(clf.predict_proba([[4, 5]]), before)
    assert clf.embedder().table is clf.params_.embed


def test_sentence_classifier_fit_is_bit_deterministic():
    def run():
        return SentenceClassifier(embed_size=8, max_epochs=3, seed=5).fit(
            [[4, 5], [5], [4, 4]], [1, 5, 9], vocab_size=6)
    a, b = run(), run()
    for k, t in a.params_.as_dict().items():
        np.testing.assert_array_equal(t.data, b.params_.as_dict()[k].data)


# ---------------------------------------------------------------------------
# discriminative loss

def _frozen_clf(vocab_size=7, embed_size=6):
    clf = SentenceClassifier(embed_size=embed_size, max_epochs=3, seed=2)
    seqs = [[4, 5], [5, 6], [6, 4], [4], [5], [6]]
    clf.fit(seqs, [1, 2, 3, 4, 5, 6], vocab_size=vocab_size)
    return clf.freeze()


def test_discriminative_loss_matches_log_probability_on_hard_rows():
    clf = _frozen_clf()
    ids = [4, 6, 5]
    tape = Tape()
    rows = [Tensor(np.eye(7)[[i]]) for i in ids]
    for cat in (1, 4, 9):
        loss = sentence_discriminative_loss(tape, clf, rows, cat)
        want = -math.log(clf.predict_proba([ids])[0, cat - 1])
        assert abs(loss.item() - want) < 1e-12


def test_discriminative_loss_category_bounds():
    clf = _frozen_clf()
    tape = Tape()
    rows = [Tensor(np.eye(7)[[4]])]
    for bad in (0, 10):
        with pytest.raises(ValidationError, match="category must be in 1..9"):
            sentence_discriminative_loss(tape, clf, rows, bad)


def test_frozen_classifier_receives_no_gradient():
    clf = _frozen_clf()
    snapshot = {k: t.data.copy() for k, t in clf.params_.as_dict().items()}
    rng = np.random.default_rng(6)
    lg_params = init_lg_params(7, 4, rng, embed_size=5, hidden_size=6)
    cond = rng.standard_normal((3, 4))
    tape = Tape()
    l_ss, l_disc = sentence_losses_batch(
        tape, cond, lg_params, clf, ref_tokens=[[4, 5], [5], [6, 6]],
        categories=np.array([1, 2, 3]), t_max=5, want_ss=True, want_disc=True)
    total = ad.add(tape, l_ss, l_disc)
    tape.backward(total)
    for k, t in clf.params_.as_dict().items():
        assert not t.requires_grad
        assert t.grad is None or not t.grad.any()
        np.testing.assert_array_equal(t.data, snapshot[k])
    # the generator, in contrast, does get a training signal
    grads = [t.grad for t in lg_params.as_dict().values() if t.grad is not None]
    assert any(g.any() for g in grads)


def test_sentence_losses_batch_term_selection():
    clf = _frozen_clf()
    rng = np.random.default_rng(7)
    lg_params = init_lg_params(7, 4, rng, embed_size=5, hidden_size=6)
    cond = rng.standard_normal((2, 4))
    tape = Tape()
    l_ss, l_disc = sentence_losses_batch(
        tape, cond, lg_params, clf, ref_tokens=[[4], [5]],
        categories=None, t_max=4, want_ss=True, want_disc=False)
    assert l_ss is not None and l_disc is None
    # per-row cosine sum stays within [-n, n]
    assert -2.0 - 1e-9 <= -l_ss.item() <= 2.0 + 1e-9


# ---------------------------------------------------------------------------
# synonym fixture

def test_default_synonyms_are_symmetric():
    for word, alts in DEFAULT_SYNONYMS.items():
        for alt in alts:
            assert word in DEFAULT_SYNONYMS[alt], (word, alt)


def test_synonym_table_round_trip(tmp_path):
    path = tmp_path / "syn.json"
    save_synonym_table(str(path))
    assert load_synonyms(str(path)) == DEFAULT_SYNONYMS
    custom = {"mask": ["covering"]}
    save_synonym_table(str(path), custom)
    assert load_synonyms(str(path)) == custom
