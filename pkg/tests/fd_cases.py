"""Finite-difference gradient cases shared by the tensor tests and the
acceptance gate.

Each case builder takes a seed and returns (build_loss, wrt, tol) ready
for xpad.autodiff.grad_check. build_loss is deterministic: all random
inputs are drawn once up front, the closure only replays tape ops.
Rollout-based cases pin the rollout length so the loss stays smooth
under coordinate perturbation (the length choice is a discrete input,
not part of the differentiable path).
"""

import numpy as np

from xpad import autodiff as ad
from xpad.autodiff import LstmParams, Tape, Tensor
from xpad.lg import forward_teacher_forced, init_lg_params, soft_decode_batch
from xpad.losses import LossWeights, MeanEmbedder, total_loss, word_wise_loss
from xpad.pad import init_pad_params, pad_forward_batch

PRIMITIVE_TOL = 1e-5
ROLLOUT_TOL = 1e-4


def _reduce(tape, t, w):
    """Project any tensor to a scalar with fixed random weights."""
    flat = ad.reshape(tape, t, (1, t.data.size))
    return ad.matmul(tape, flat, ad.constant(w))


def _away_from_zero(arr, margin=0.05):
    """Shift entries off the relu kink so finite differences stay valid."""
    out = arr.copy()
    small = np.abs(out) < margin
    out[small] = margin * np.where(out[small] >= 0, 1.0, -1.0) + out[small]
    return out


# ---------------------------------------------------------------------------
# primitives

def case_affine(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    w = Tensor(rng.standard_normal((4, 2)))
    b = Tensor(rng.standard_normal(2))
    red = rng.standard_normal((6, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.affine(tape, x, w, b), red)

    return build, {"x": x, "w": w, "b": b}, PRIMITIVE_TOL


def case_matmul(rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 2)))
    red = rng.standard_normal((6, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.matmul(tape, a, b), red)

    return build, {"a": a, "b": b}, PRIMITIVE_TOL


def case_add(rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((3, 4)))
    red = rng.standard_normal((12, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.add(tape, a, b), red)

    return build, {"a": a, "b": b}, PRIMITIVE_TOL


def case_scale(rng):
    x = Tensor(rng.standard_normal((2, 5)))
    red = rng.standard_normal((10, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.scale(tape, x, -1.7), red)

    return build, {"x": x}, PRIMITIVE_TOL


def case_relu(rng):
    x = Tensor(_away_from_zero(rng.standard_normal((3, 4))))
    red = rng.standard_normal((12, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.relu(tape, x), red)

    return build, {"x": x}, PRIMITIVE_TOL


def case_slice_cols(rng):
    x = Tensor(rng.standard_normal((3, 6)))
    red = rng.standard_normal((9, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.slice_cols(tape, x, 1, 4), red)

    return build, {"x": x}, PRIMITIVE_TOL


def case_embedding_lookup(rng):
    table = Tensor(rng.standard_normal((7, 4)))
    ids = np.array([2, 2, 5, 0])  # duplicate id exercises scatter-add
    red = rng.standard_normal((16, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.embedding_lookup(tape, table, ids), red)

    return build, {"table": table}, PRIMITIVE_TOL


def case_lstm_cell(rng):
    dh = 4
    x = Tensor(rng.standard_normal((2, 3)))
    h = Tensor(rng.standard_normal((2, dh)))
    c = Tensor(rng.standard_normal((2, dh)))
    p = LstmParams(
        w_x=Tensor(rng.standard_normal((3, 4 * dh)) * 0.5),
        w_h=Tensor(rng.standard_normal((dh, 4 * dh)) * 0.5),
        b=Tensor(rng.standard_normal(4 * dh) * 0.5),
    )
    red_h = rng.standard_normal((2 * dh, 1))
    red_c = rng.standard_normal((2 * dh, 1))

    def build():
        tape = Tape()
        h_out, c_out = ad.lstm_cell(tape, x, h, c, p)
        return tape, ad.add(tape, _reduce(tape, h_out, red_h),
                            _reduce(tape, c_out, red_c))

    wrt = {"x": x, "h": h, "c": c, "w_x": p.w_x, "w_h": p.w_h, "b": p.b}
    return build, wrt, PRIMITIVE_TOL


def case_softmax_xent(rng):
    logits = Tensor(rng.standard_normal(5))
    target = int(rng.integers(0, 5))

    def build():
        tape = Tape()
        return tape, ad.softmax_xent(tape, logits, target)

    return build, {"logits": logits}, PRIMITIVE_TOL


def case_softmax_xent_rows(rng):
    logits = Tensor(rng.standard_normal((4, 6)))
    targets = rng.integers(0, 6, size=4)
    mask = np.array([1.0, 0.5, 1.0, 0.0])

    def build():
        tape = Tape()
        return tape, ad.softmax_xent_rows(tape, logits, targets, mask)

    return build, {"logits": logits}, PRIMITIVE_TOL


def case_softmax_rows(rng):
    logits = Tensor(rng.standard_normal((3, 5)))
    red = rng.standard_normal((15, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.softmax_rows(tape, logits), red)

    return build, {"logits": logits}, PRIMITIVE_TOL


def case_cosine(rng):
    a = Tensor(rng.standard_normal(6) + np.sign(rng.standard_normal(6)) * 0.3)
    b = Tensor(rng.standard_normal(6) + np.sign(rng.standard_normal(6)) * 0.3)

    def build():
        tape = Tape()
        return tape, ad.cosine(tape, a, b)

    return build, {"a": a, "b": b}, PRIMITIVE_TOL


def case_row_cosine_sum(rng):
    a = Tensor(rng.standard_normal((3, 5)) + 0.4)
    b = Tensor(rng.standard_normal((3, 5)) - 0.4)

    def build():
        tape = Tape()
        return tape, ad.row_cosine_sum(tape, a, b)

    return build, {"a": a, "b": b}, PRIMITIVE_TOL


def case_mean_axis0(rng):
    x = Tensor(rng.standard_normal((4, 3)))
    red = rng.standard_normal((3, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.mean_axis0(tape, x), red)

    return build, {"x": x}, PRIMITIVE_TOL


def case_masked_step_mean(rng):
    steps = [Tensor(rng.standard_normal((2, 4))) for _ in range(3)]
    mask = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    red = rng.standard_normal((8, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.masked_step_mean(tape, steps, mask), red)

    return build, {f"s{i}": s for i, s in enumerate(steps)}, PRIMITIVE_TOL


def case_reshape(rng):
    x = Tensor(rng.standard_normal((2, 6)))
    red = rng.standard_normal((12, 1))

    def build():
        tape = Tape()
        return tape, _reduce(tape, ad.reshape(tape, x, (3, 4)), red)

    return build, {"x": x}, PRIMITIVE_TOL


def case_dropout(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    red = rng.standard_normal((12, 1))
    mask_seed = int(rng.integers(0, 2**31))

    def build():
        tape = Tape()
        out = ad.dropout(tape, x, 0.4, True, np.random.default_rng(mask_seed))
        return tape, _reduce(tape, out, red)

    return build, {"x": x}, PRIMITIVE_TOL


PRIMITIVE_CASES = {
    "affine": case_affine,
    "matmul": case_matmul,
    "add": case_add,
    "scale": case_scale,
    "relu": case_relu,
    "slice_cols": case_slice_cols,
    "embedding_lookup": case_embedding_lookup,
    "lstm_cell": case_lstm_cell,
    "softmax_xent": case_softmax_xent,
    "softmax_xent_rows": case_softmax_xent_rows,
    "softmax_rows": case_softmax_rows,
    "cosine": case_cosine,
    "row_cosine_sum": case_row_cosine_sum,
    "mean_axis0": case_mean_axis0,
    "masked_step_mean": case_masked_step_mean,
    "reshape": case_reshape,
    "dropout": case_dropout,
}


# ---------------------------------------------------------------------------
# composite losses

VOCAB = 9
COND = 6
EMBED = 4
HIDDEN = 5
STEPS = 3


def _small_lg(rng):
    return init_lg_params(VOCAB, COND, rng, embed_size=EMBED, hidden_size=HIDDEN)


def case_loss_pad(rng):
    params = init_pad_params(5, 4, rng)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 10, size=6)

    def build():
        tape = Tape()
        logits, _ = pad_forward_batch(tape, x, params)
        return tape, ad.softmax_xent_rows(tape, logits, y)

    return build, params.as_dict(), PRIMITIVE_TOL


def case_loss_ww(rng):
    params = _small_lg(rng)
    cond = rng.standard_normal(COND)
    ref = [int(v) for v in rng.integers(4, VOCAB, size=4)]

    def build():
        tape = Tape()
        rows = forward_teacher_forced(tape, cond, ref, params)
        return tape, word_wise_loss(tape, rows, ref)

    return build, params.as_dict(), PRIMITIVE_TOL


def _rollout_embedding(tape, cond, params, table):
    rows, _, mask = soft_decode_batch(tape, cond, params, t_max=STEPS,
                                      n_steps=STEPS)
    return MeanEmbedder(table).embed_soft_batch(tape, rows, mask)


def case_loss_ss(rng):
    params = _small_lg(rng)
    cond = rng.standard_normal((2, COND))
    table = Tensor(rng.standard_normal((VOCAB, 3)), requires_grad=False)
    ref_emb = rng.standard_normal((2, 3))

    def build():
        tape = Tape()
        gen_emb = _rollout_embedding(tape, cond, params, table)
        cos = ad.row_cosine_sum(tape, ad.constant(ref_emb), gen_emb)
        return tape, ad.scale(tape, cos, -1.0)

    return build, params.as_dict(), ROLLOUT_TOL


def case_loss_disc(rng):
    params = _small_lg(rng)
    cond = rng.standard_normal((2, COND))
    table = Tensor(rng.standard_normal((VOCAB, 3)), requires_grad=False)
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=False)
    b = Tensor(rng.standard_normal(4), requires_grad=False)
    cats = rng.integers(0, 4, size=2)

    def build():
        tape = Tape()
        gen_emb = _rollout_embedding(tape, cond, params, table)
        logits = ad.affine(tape, gen_emb, w, b)
        return tape, ad.softmax_xent_rows(tape, logits, cats)

    return build, params.as_dict(), ROLLOUT_TOL


def case_loss_total(rng):
    lg = _small_lg(rng)
    pad = init_pad_params(5, 4, rng)
    x = rng.standard_normal((4, 5))
    y = rng.integers(0, 10, size=4)
    cond = rng.standard_normal((2, COND))
    ref = [int(v) for v in rng.integers(4, VOCAB, size=3)]
    table = Tensor(rng.standard_normal((VOCAB, 3)), requires_grad=False)
    ref_emb = rng.standard_normal((2, 3))
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=False)
    b = Tensor(rng.standard_normal(4), requires_grad=False)
    cats = rng.integers(0, 4, size=2)
    weights = LossWeights(omega1=0.7, omega2=1.3, lambda_ww=1.0,
                          lambda_disc=0.2, lambda_ss=0.5)

    def build():
        tape = Tape()
        logits, _ = pad_forward_batch(tape, x, pad)
        l_pad = ad.softmax_xent_rows(tape, logits, y)
        rows = forward_teacher_forced(tape, cond[0], ref, lg)
        l_ww = word_wise_loss(tape, rows, ref)
        gen_emb = _rollout_embedding(tape, cond, lg, table)
        cos = ad.row_cosine_sum(tape, ad.constant(ref_emb), gen_emb)
        l_ss = ad.scale(tape, cos, -1.0)
        disc_logits = ad.affine(tape, gen_emb, w, b)
        l_disc = ad.softmax_xent_rows(tape, disc_logits, cats)
        return tape, total_loss(tape, weights, l_pad=l_pad, l_ww=l_ww,
                                l_disc=l_disc, l_ss=l_ss)

    wrt = {**{f"lg_{k}": v for k, v in lg.as_dict().items()},
           **{f"pad_{k}": v for k, v in pad.as_dict().items()}}
    return build, wrt, ROLLOUT_TOL


COMPOSITE_CASES = {
    "loss_pad": case_loss_pad,
    "loss_ww": case_loss_ww,
    "loss_ss": case_loss_ss,
    "loss_disc": case_loss_disc,
    "loss_total": case_loss_total,
}
