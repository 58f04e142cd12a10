"""Autodiff primitives: finite-difference checks and tape semantics."""

import numpy as np
import pytest

from fd_cases import PRIMITIVE_CASES
from oracles import oracle_lstm_forward, oracle_xent
from xpad import autodiff as ad
from xpad.autodiff import (
    AutodiffError,
    LstmParams,
    OutOfVocabularyError,
    ShapeError,
    Tape,
    Tensor,
    grad_check,
)

N_SEEDS = 100


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(N_SEEDS):
        build, wrt, tol = PRIMITIVE_CASES[name](np.random.default_rng(seed))
        worst = max(worst, grad_check(build, wrt))
    assert worst < tol, f"{name}: max relative error {worst:.3e}"


def test_reused_node_accumulates_both_branches():
    # y = x + x and y = 2x must produce identical dx
    x1 = Tensor(np.array([[1.5, -0.7, 2.0]]))
    tape = Tape()
    y = ad.add(tape, x1, x1)
    tape.backward(ad.reshape(tape, ad.matmul(
        tape, y, ad.constant(np.ones((3, 1)))), ()))
    g_sum = x1.grad.copy()

    x2 = Tensor(np.array([[1.5, -0.7, 2.0]]))
    tape = Tape()
    y = ad.scale(tape, x2, 2.0)
    tape.backward(ad.reshape(tape, ad.matmul(
        tape, y, ad.constant(np.ones((3, 1)))), ()))
    assert np.array_equal(g_sum, x2.grad)


def test_zero_grads_then_backward_is_bit_deterministic():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 3)))
    w = Tensor(rng.standard_normal((3, 2)))
    b = Tensor(rng.standard_normal(2))
    y = rng.integers(0, 2, size=4)

    def run():
        tape = Tape()
        logits = ad.affine(tape, ad.relu(tape, x), w, b)
        loss = ad.softmax_xent_rows(tape, logits, y)
        tape.backward(loss)
        grads = {"x": x.grad.copy(), "w": w.grad.copy(), "b": b.grad.copy()}
        tape.zero_grads()
        return grads

    first = run()
    second = run()
    for k in first:
        assert np.array_equal(first[k], second[k])
        assert {"x": x, "w": w, "b": b}[k].grad.sum() == 0.0


def test_softmax_xent_gradient_sums_to_zero():
    for seed in range(20):
        logits = Tensor(np.random.default_rng(seed).standard_normal(7))
        tape = Tape()
        loss = ad.softmax_xent(tape, logits, seed % 7)
        tape.backward(loss)
        assert abs(logits.grad.sum()) < 1e-12


def test_softmax_xent_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    for _ in range(30):
        vals = rng.standard_normal(6)
        target = int(rng.integers(0, 6))
        tape = Tape()
        loss = ad.softmax_xent(tape, Tensor(vals), target)
        assert loss.item() == pytest.approx(oracle_xent(list(vals), target), abs=1e-12)


def test_uniform_logits_cross_entropy_is_ln_k():
    for k in (2, 10, 50):
        tape = Tape()
        loss = ad.softmax_xent(tape, Tensor(np.zeros(k)), 0)
        assert loss.item() == pytest.approx(np.log(k), abs=1e-12)


def test_lstm_cell_forward_matches_loop_oracle():
    rng = np.random.default_rng(17)
    dh = 3
    x = rng.standard_normal((2, 4))
    h = rng.standard_normal((2, dh))
    c = rng.standard_normal((2, dh))
    p = LstmParams(w_x=Tensor(rng.standard_normal((4, 4 * dh))),
                   w_h=Tensor(rng.standard_normal((dh, 4 * dh))),
                   b=Tensor(rng.standard_normal(4 * dh)))
    tape = Tape()
    h_out, c_out = ad.lstm_cell(tape, ad.constant(x), ad.constant(h),
                                ad.constant(c), p)
    ref_h, ref_c = oracle_lstm_forward(
        x.tolist(), h.tolist(), c.tolist(),
        p.w_x.data.tolist(), p.w_h.data.tolist(), p.b.data.tolist())
    np.testing.assert_allclose(h_out.data, np.array(ref_h), atol=1e-12)
    np.testing.assert_allclose(c_out.data, np.array(ref_c), atol=1e-12)


def test_embedding_lookup_empty_ids_and_oov():
    table = Tensor(np.ones((5, 3)))
    tape = Tape()
    out = ad.embedding_lookup(tape, table, np.array([], dtype=np.int64))
    assert out.shape == (0, 3)
    with pytest.raises(OutOfVocabularyError, match="token id 5"):
        ad.embedding_lookup(tape, table, [0, 5])
    with pytest.raises(OutOfVocabularyError, match="-1"):
        ad.embedding_lookup(tape, table, [-1])


def test_cosine_degenerate_norm_guard():
    tape = Tape()
    a = Tensor(np.zeros(4))
    b = Tensor(np.ones(4))
    out = ad.cosine(tape, a, b)
    assert out.item() == 0.0
    assert not out.requires_grad
    assert len(tape) == 0  # nothing recorded, so no gradient can flow


def test_dropout_identity_and_statistics():
    x = Tensor(np.ones((1000, 4)))
    tape = Tape()
    assert ad.dropout(tape, x, 0.0, True, np.random.default_rng(0)) is x
    assert ad.dropout(tape, x, 0.5, False) is x

    out = ad.dropout(tape, x, 0.25, True, np.random.default_rng(0))
    vals = out.data.reshape(-1)
    kept = vals > 0
    # inverted scaling: survivors are 1/(1-rate), mean stays near 1
    assert np.allclose(vals[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.03
    assert abs(vals.mean() - 1.0) < 0.05

    with pytest.raises(AutodiffError):
        ad.dropout(tape, x, 1.0, True, np.random.default_rng(0))
    with pytest.raises(AutodiffError):
        ad.dropout(tape, x, 0.5, True, None)


def test_backward_rejects_bad_roots():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.backward(Tensor(np.ones(3)))
    with pytest.raises(AutodiffError):
        tape.backward(Tensor(np.array(np.nan)))


@pytest.mark.parametrize("build", [
    lambda t: ad.affine(t, Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))),
                        Tensor(np.ones(2))),
    lambda t: ad.matmul(t, Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
    lambda t: ad.add(t, Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
    lambda t: ad.slice_cols(t, Tensor(np.ones((2, 3))), 2, 5),
    lambda t: ad.mean_axis0(t, Tensor(np.ones(3))),
    lambda t: ad.reshape(t, Tensor(np.ones((2, 3))), (4, 2)),
    lambda t: ad.softmax_xent(t, Tensor(np.ones(1)), 0),
    lambda t: ad.softmax_xent_rows(t, Tensor(np.ones((2, 3))), [0, 1, 2]),
])
def test_shape_errors(build):
    with pytest.raises(ShapeError):
        build(Tape())


def test_constant_tensors_record_nothing():
    tape = Tape()
    out = ad.affine(tape, ad.constant(np.ones((2, 3))),
                    ad.constant(np.ones((3, 2))), ad.constant(np.ones(2)))
    assert not out.requires_grad
    assert len(tape) == 0
