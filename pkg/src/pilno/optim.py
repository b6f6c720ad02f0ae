"""Adam and Muon over plain lists of tensors.

Muon constants (5 Newton-Schulz steps, quintic coefficients, momentum 0.95,
``sqrt(max(1, rows/cols))`` scale) are the public reference defaults.
Matrix-shaped parameters are orthogonalized; vectors fall back to Adam.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor

from .errors import NumericalFailure

NS_COEFFS = (3.4445, -4.7750, 2.0315)


def newton_schulz_orthogonalize(G: Tensor, steps: int = 5, coeffs=NS_COEFFS) -> Tensor:
    """Approximate ``U V^T`` of ``G = U S V^T`` with a fixed quintic iteration."""
    if G.ndim != 2:
        raise ValueError("Newton-Schulz needs a matrix")
    norm = torch.linalg.matrix_norm(G)
    if norm == 0:
        return G.clone()
    a, b, c = coeffs
    X = G / norm
    tall = X.shape[0] > X.shape[1]
    if tall:
        X = X.T
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * A @ A) @ X
    return X.T if tall else X


def _check(grads: Sequence[Tensor], names: Sequence[str] | None):
    for i, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise NumericalFailure(f"gradient of {names[i] if names else f'parameter {i}'}")


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = names
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads: Sequence[Tensor], lr: float | None = None, check: bool = True) -> None:
        if check:
            _check(grads, self.names)
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.b1).add_(g, alpha=1.0 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1.0 - self.b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def state_tensors(self) -> list[Tensor]:
        return self.m + self.v

    def load_state(self, t: int, tensors: Sequence[Tensor]) -> None:
        n = len(self.params)
        self.t = t
        for dst, src in zip(self.m + self.v, tensors[: 2 * n]):
            dst.copy_(src)


class Muon:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, momentum: float = 0.95,
                 ns_steps: int = 5, adam_lr: float | None = None,
                 names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = names
        self.lr = lr
        self.momentum = momentum
        self.ns_steps = ns_steps
        self.adam_lr = adam_lr
        self.matrix_idx = [i for i, p in enumerate(self.params) if p.ndim == 2]
        self.vector_idx = [i for i, p in enumerate(self.params) if p.ndim != 2]
        self.buffers = [torch.zeros_like(self.params[i]) for i in self.matrix_idx]
        self.fallback = Adam([self.params[i] for i in self.vector_idx], lr=lr)
        self.t = 0

    @torch.no_grad()
    def step(self, grads: Sequence[Tensor], lr: float | None = None) -> None:
        _check(grads, self.names)
        lr = self.lr if lr is None else lr
        self.t += 1
        for buf, i in zip(self.buffers, self.matrix_idx):
            p = self.params[i]
            buf.mul_(self.momentum).add_(grads[i])
            scale = max(1.0, p.shape[0] / p.shape[1]) ** 0.5
            p.sub_(lr * scale * newton_schulz_orthogonalize(buf, self.ns_steps))
        vec_lr = lr if self.adam_lr is None else self.adam_lr
        self.fallback.step([grads[i] for i in self.vector_idx], lr=vec_lr, check=False)

    def state_tensors(self) -> list[Tensor]:
        return self.buffers + self.fallback.state_tensors()

    def load_state(self, t: int, tensors: Sequence[Tensor]) -> None:
        self.t = t
        k = len(self.buffers)
        for dst, src in zip(self.buffers, tensors[:k]):
            dst.copy_(src)
        self.fallback.load_state(t, tensors[k:])


def make_optimizer(name: str, params, lr: float, names=None, **kw):
    if name == "adam":
        return Adam(params, lr=lr, names=names)
    if name == "muon":
        return Muon(params, lr=lr, names=names, **kw)
    raise ValueError(f"unknown optimizer {name!r}")
