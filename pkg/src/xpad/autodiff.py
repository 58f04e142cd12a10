"""Reverse-mode automatic differentiation on a flat tape.

A :class:`Tensor` owns a float64 value array and a same-shape gradient
accumulator. Ops compute forward with numpy and push a backward closure
onto a :class:`Tape`; ``Tape.backward`` replays the closures in reverse
recording order, which is a valid topological order because operands
always exist before the op that consumes them.

One tape per forward pass. Parameters are ordinary tensors that outlive
tapes; gradients accumulate across uses within a pass and are cleared
with ``Tape.zero_grads`` (or ``zero_grads`` on a parameter collection)
between steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class OutOfVocabularyError(AutodiffError):
    pass


class Tensor:
    """Value + gradient accumulator, always float64."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = True):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """Tensor that never receives gradient (frozen inputs, conditioning)."""
    return Tensor(data, requires_grad=False)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad[...] = 0.0


class Tape:
    def __init__(self):
        self._backs: list[Callable[[], None]] = []
        self._touched: list[Tensor] = []
        self._touched_ids: set[int] = set()

    def _watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._touched_ids:
                self._touched_ids.add(id(t))
                self._touched.append(t)

    def _record(self, back: Callable[[], None], tensors: Sequence[Tensor]) -> None:
        self._watch(*tensors)
        self._backs.append(back)

    def backward(self, root: Tensor) -> None:
        """Seed d(root)=1 and run every recorded closure in reverse order."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if not np.isfinite(root.data).all():
            raise AutodiffError("backward called on non-finite value")
        root.grad[...] = 1.0
        for back in reversed(self._backs):
            back()

    def zero_grads(self) -> None:
        zero_grads(self._touched)

    def __len__(self) -> int:
        return len(self._backs)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# primitives


def affine(tape: Tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x:(n,d_in), w:(d_in,d_out), b:(d_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"affine expects 2-d x, 2-d w, 1-d b; got x{x.shape} w{w.shape} b{b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = Tensor(x.data @ w.data + b.data, requires_grad=_needs_grad(x, w, b))
    if out.requires_grad:
        def back() -> None:
            g = out.grad
            if x.requires_grad:
                x.grad += g @ w.data.T
            if w.requires_grad:
                w.grad += x.data.T @ g
            if b.requires_grad:
                b.grad += g.sum(axis=0)
        tape._record(back, (x, w, b, out))
    return out


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def back() -> None:
            g = out.grad
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g
        tape._record(back, (a, b, out))
    return out


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def back() -> None:
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad
        tape._record(back, (a, b, out))
    return out


def scale(tape: Tape, x: Tensor, k: float) -> Tensor:
    k = float(k)
    out = Tensor(x.data * k, requires_grad=x.requires_grad)
    if out.requires_grad:
        def back() -> None:
            x.grad += out.grad * k
        tape._record(back, (x, out))
    return out


def relu(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    if out.requires_grad:
        pos = x.data > 0.0
        def back() -> None:
            x.grad += out.grad * pos
        tape._record(back, (x, out))
    return out


def slice_cols(tape: Tape, x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] invalid for shape {x.shape}")
    out = Tensor(x.data[:, lo:hi].copy(), requires_grad=x.requires_grad)
    if out.requires_grad:
        def back() -> None:
            x.grad[:, lo:hi] += out.grad
        tape._record(back, (x, out))
    return out


def embedding_lookup(tape: Tape, table: Tensor, ids) -> Tensor:
    """Row gather: returns table[ids] with scatter-add backward.

    Empty id sequences are legal and produce a (0, d) tensor.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-d, got shape {ids.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise OutOfVocabularyError(f"token id {bad} outside table of size {vocab}")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)
    if out.requires_grad:
        def back() -> None:
            np.add.at(table.grad, ids, out.grad)
        tape._record(back, (table, out))
    return out


@dataclass
class LstmParams:
    """One cell: gate order along the 4*d_h axis is (i, f, g, o)."""

    w_x: Tensor   # (d_in, 4*d_h)
    w_h: Tensor   # (d_h, 4*d_h)
    b: Tensor     # (4*d_h,)

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_cell(tape: Tape, x: Tensor, h: Tensor, c: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """Standard LSTM recurrence; returns (h', c').

    c' = sigmoid(f)*c + sigmoid(i)*tanh(g);  h' = sigmoid(o)*tanh(c').
    Fused into one tape node so BPTT costs one closure per step.
    """
    dh = p.hidden_size
    if x.data.ndim != 2 or h.data.ndim != 2 or c.data.ndim != 2:
        raise ShapeError("lstm_cell expects 2-d x, h, c")
    if x.shape[0] != h.shape[0] or h.shape != c.shape or h.shape[1] != dh:
        raise ShapeError(f"lstm_cell shape mismatch: x{x.shape} h{h.shape} c{c.shape} d_h={dh}")
    if x.shape[1] != p.w_x.shape[0] or p.w_x.shape[1] != 4 * dh or p.w_h.shape != (dh, 4 * dh):
        raise ShapeError(f"lstm_cell params mismatch: x{x.shape} w_x{p.w_x.shape} w_h{p.w_h.shape}")

    z = x.data @ p.w_x.data + h.data @ p.w_h.data + p.b.data
    gi = _sigmoid(z[:, 0 * dh:1 * dh])
    gf = _sigmoid(z[:, 1 * dh:2 * dh])
    gg = np.tanh(z[:, 2 * dh:3 * dh])
    go = _sigmoid(z[:, 3 * dh:4 * dh])
    c_new = gf * c.data + gi * gg
    tc = np.tanh(c_new)

    needs = _needs_grad(x, h, c, p.w_x, p.w_h, p.b)
    h_out = Tensor(go * tc, requires_grad=needs)
    c_out = Tensor(c_new, requires_grad=needs)
    if needs:
        c_in = c.data
        x_in = x.data
        h_in = h.data

        def back() -> None:
            dc_total = c_out.grad + h_out.grad * go * (1.0 - tc * tc)
            dz = np.empty_like(z)
            dz[:, 0 * dh:1 * dh] = dc_total * gg * gi * (1.0 - gi)
            dz[:, 1 * dh:2 * dh] = dc_total * c_in * gf * (1.0 - gf)
            dz[:, 2 * dh:3 * dh] = dc_total * gi * (1.0 - gg * gg)
            dz[:, 3 * dh:4 * dh] = h_out.grad * tc * go * (1.0 - go)
            if x.requires_grad:
                x.grad += dz @ p.w_x.data.T
            if h.requires_grad:
                h.grad += dz @ p.w_h.data.T
            if c.requires_grad:
                c.grad += dc_total * gf
            if p.w_x.requires_grad:
                p.w_x.grad += x_in.T @ dz
            if p.w_h.requires_grad:
                p.w_h.grad += h_in.T @ dz
            if p.b.requires_grad:
                p.b.grad += dz.sum(axis=0)

        tape._record(back, (x, h, c, p.w_x, p.w_h, p.b, h_out, c_out))
    return h_out, c_out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(tape: Tape, logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single 1-d logit vector."""
    if logits.data.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"softmax_xent expects 1-d logits with K>=2, got {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise ShapeError(f"target {target} outside K={logits.shape[0]}")
    logp = _log_softmax(logits.data)
    out = Tensor(-logp[target], requires_grad=logits.requires_grad)
    if out.requires_grad:
        def back() -> None:
            g = np.exp(logp)
            g[target] -= 1.0
            logits.grad += g * out.grad
        tape._record(back, (logits, out))
    return out


def softmax_xent_rows(tape: Tape, logits: Tensor, targets, mask=None) -> Tensor:
    """Sum over rows of -log softmax(logits_n)[targets_n], optionally masked.

    The batched equal of summing `softmax_xent` row by row; mask entries
    weight each row's contribution (0 drops it entirely, gradient included).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_xent_rows expects 2-d logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ShapeError(f"target id outside K={k}")
    m = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != (n,):
        raise ShapeError(f"mask shape {m.shape} does not match logits rows {n}")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    out = Tensor(-(logp[rows, targets] * m).sum(), requires_grad=logits.requires_grad)
    if out.requires_grad:
        def back() -> None:
            g = np.exp(logp)
            g[rows, targets] -= 1.0
            logits.grad += g * (m[:, None] * out.grad)
        tape._record(back, (logits, out))
    return out


def softmax_rows(tape: Tape, logits: Tensor) -> Tensor:
    """Row-wise softmax kept differentiable (soft-decoding path)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-d logits, got {logits.shape}")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, requires_grad=logits.requires_grad)
    if out.requires_grad:
        def back() -> None:
            g = out.grad
            logits.grad += p * (g - (g * p).sum(axis=1, keepdims=True))
        tape._record(back, (logits, out))
    return out


DEGENERATE_NORM = 1e-12


def cosine(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-d vectors.

    Either norm below 1e-12 makes the value 0 with zero gradient (the
    degenerate direction carries no usable signal).
    """
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine expects matching 1-d vectors, got {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return Tensor(0.0, requires_grad=False)
    c = float(a.data @ b.data) / (na * nb)
    out = Tensor(c, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def back() -> None:
            g = float(out.grad)
            if a.requires_grad:
                a.grad += g * (b.data / (na * nb) - c * a.data / (na * na))
            if b.requires_grad:
                b.grad += g * (a.data / (na * nb) - c * b.data / (nb * nb))
        tape._record(back, (a, b, out))
    return out


def row_cosine_sum(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Sum over rows of cosine(a_n, b_n); degenerate rows contribute 0."""
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"row_cosine_sum expects matching 2-d, got {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    ok = (na >= DEGENERATE_NORM) & (nb >= DEGENERATE_NORM)
    dot = (a.data * b.data).sum(axis=1)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0)
    out = Tensor(cos.sum(), requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        def back() -> None:
            g = float(out.grad)
            w = ok / denom
            if a.requires_grad:
                a.grad += g * (b.data * w[:, None]
                               - a.data * (cos * np.where(ok, 1.0 / (na * na), 0.0))[:, None])
            if b.requires_grad:
                b.grad += g * (a.data * w[:, None]
                               - b.data * (cos * np.where(ok, 1.0 / (nb * nb), 0.0))[:, None])
        tape._record(back, (a, b, out))
    return out


def mean_axis0(tape: Tape, x: Tensor) -> Tensor:
    """Mean over rows; (n, d) -> (d,). n must be positive."""
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"mean_axis0 needs a non-empty 2-d tensor, got {x.shape}")
    n = x.shape[0]
    out = Tensor(x.data.mean(axis=0), requires_grad=x.requires_grad)
    if out.requires_grad:
        def back() -> None:
            x.grad += out.grad[None, :] / n
        tape._record(back, (x, out))
    return out


def masked_step_mean(tape: Tape, steps: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """Per-row mean over time of stacked (n, d) step tensors.

    mask is (n, T) with at least one active step per row; inactive steps
    contribute nothing forward or backward.
    """
    if not steps:
        raise ShapeError("masked_step_mean needs at least one step")
    n, d = steps[0].shape
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n, len(steps)):
        raise ShapeError(f"mask shape {mask.shape} does not match ({n},{len(steps)})")
    counts = mask.sum(axis=1)
    if (counts <= 0).any():
        raise ShapeError("masked_step_mean: every row needs at least one active step")
    acc = np.zeros((n, d))
    for t, s in enumerate(steps):
        if s.shape != (n, d):
            raise ShapeError(f"step {t} shape {s.shape} != ({n},{d})")
        acc += s.data * mask[:, t, None]
    out = Tensor(acc / counts[:, None], requires_grad=_needs_grad(*steps))
    if out.requires_grad:
        def back() -> None:
            g = out.grad / counts[:, None]
            for t, s in enumerate(steps):
                if s.requires_grad:
                    s.grad += g * mask[:, t, None]
        tape._record(back, tuple(steps) + (out,))
    return out


def reshape(tape: Tape, x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)
    if out.requires_grad:
        def back() -> None:
            x.grad += out.grad.reshape(x.shape)
        tape._record(back, (x, out))
    return out


def dropout(tape: Tape, x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted-scaling dropout; identity when not training or rate==0."""
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise AutodiffError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep, requires_grad=x.requires_grad)
    if out.requires_grad:
        def back() -> None:
            x.grad += out.grad * keep
        tape._record(back, (x, out))
    return out


# ---------------------------------------------------------------------------
# finite differences


def grad_check(build_loss: Callable[[], tuple[Tape, Tensor]],
               wrt: dict[str, Tensor],
               h: float = 1e-5,
               sample: int | None = None,
               rng: np.random.Generator | None = None,
               atol: float = 1e-8) -> float:
    """Compare analytic gradients to central finite differences.

    build_loss must rebuild the scalar loss from scratch (fresh tape) and be
    deterministic across calls. Returns the max relative error over checked
    coordinates; `sample` limits the coordinates per tensor (rng-chosen).
    Near-zero analytic/numeric pairs (< 1e-7 both) count as exact, as do
    absolute disagreements within `atol` (float cancellation in the two
    loss evaluations caps how small a difference the quotient can resolve).
    """
    zero_grads(wrt.values())
    tape, loss = build_loss()
    tape.backward(loss)
    analytic = {name: t.grad.copy() for name, t in wrt.items()}
    tape.zero_grads()
    zero_grads(wrt.values())

    def value() -> float:
        t2, l2 = build_loss()
        return float(l2.data.reshape(-1)[0])

    worst = 0.0
    for name, t in wrt.items():
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = value()
            flat[i] = orig - h
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric))
            if denom < 1e-7:
                continue
            diff = abs(a - numeric)
            # below the central-difference noise floor the ratio is
            # meaningless, so tiny absolute disagreements count as exact
            if diff <= atol:
                continue
            worst = max(worst, diff / denom)
    return worst
