"""Adam, the step-decay learning-rate schedule, and gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class OptimError(RuntimeError):
    pass


def lr_at(epoch: int, base_lr: float = 2e-4, decay: float = 0.5, every: int = 20) -> float:
    """base_lr halved every 20 epochs: 0.5 ** floor(epoch / every)."""
    if epoch < 0:
        raise OptimError(f"epoch must be non-negative, got {epoch}")
    return base_lr * decay ** (epoch // every)


def clip_global_norm(params: dict[str, Tensor], max_norm: float = 5.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    sq = 0.0
    for t in params.values():
        sq += float((t.grad * t.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for t in params.values():
            t.grad *= factor
    return norm


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Gradients are read from each tensor's .grad accumulator; call
    zero_grads between steps. Zero gradient leaves a parameter exactly
    unchanged (0/eps), and any non-finite gradient aborts with the
    offending parameter's name.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if not np.isfinite(g).all():
                raise OptimError(f"non-finite gradient in parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
