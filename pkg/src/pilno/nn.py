"""Dense tanh networks, layer norm and spatial derivative propagation.

Spatial derivatives are propagated forward through the networks as a
:class:`Jet` carrying, per point and feature, the value, the gradient along
each input axis and the pure second derivative along each axis. Every jet
operation is written in torch, so reverse-mode autograd on top of a jet
evaluation yields parameter gradients of Laplacians exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

DTYPE = torch.float64
LN_EPS = 1e-5


@dataclass
class Jet:
    """Second-order axis-wise Taylor data of a field.

    Shapes: ``val (..., n, k)``, ``d1 (..., n, d, k)``, ``d2 (..., n, d, k)``.
    """

    val: Tensor
    d1: Tensor
    d2: Tensor

    @classmethod
    def seed(cls, pts: Tensor) -> "Jet":
        n, d = pts.shape
        eye = torch.eye(d, dtype=pts.dtype).expand(n, d, d)
        return cls(pts, eye, torch.zeros_like(eye))

    @classmethod
    def const(cls, val: Tensor, d: int) -> "Jet":
        z = torch.zeros(val.shape[:-1] + (d, val.shape[-1]), dtype=val.dtype)
        return cls(val, z, z)

    @property
    def d(self) -> int:
        return self.d1.shape[-2]

    def linear(self, weight: Tensor, bias: Tensor | None = None) -> "Jet":
        val = self.val @ weight.T
        if bias is not None:
            val = val + bias
        return Jet(val, self.d1 @ weight.T, self.d2 @ weight.T)

    def matmul(self, mat: Tensor) -> "Jet":
        """Right-multiply by a point-independent matrix ``(..., k, k')``."""
        n, d, k = self.d1.shape[-3:]
        if self.val.ndim == 2 and mat.ndim == 3:
            p, kout = mat.shape[0], mat.shape[-1]
            flat = mat.transpose(0, 1).reshape(k, p * kout)
            val = (self.val @ flat).reshape(n, p, kout).transpose(0, 1)
            d1, d2 = ((a.reshape(n * d, k) @ flat).reshape(n, d, p, kout).permute(2, 0, 1, 3)
                      for a in (self.d1, self.d2))
            return Jet(val, d1, d2)

        def apply(a):
            # fold (n, d) into one axis: one GEMM per batch entry
            out = a.reshape(a.shape[:-3] + (n * d, k)) @ mat
            return out.reshape(out.shape[:-2] + (n, d, mat.shape[-1]))

        return Jet(self.val @ mat, apply(self.d1), apply(self.d2))

    def map(self, f: Callable, df: Callable, d2f: Callable) -> "Jet":
        v = self.val
        g1, g2 = df(v).unsqueeze(-2), d2f(v).unsqueeze(-2)
        return Jet(f(v), g1 * self.d1, g1 * self.d2 + g2 * self.d1 * self.d1)

    def tanh(self) -> "Jet":
        t = torch.tanh(self.val)
        s1 = 1.0 - t * t
        g1, g2 = s1.unsqueeze(-2), (-2.0 * t * s1).unsqueeze(-2)
        return Jet(t, g1 * self.d1, g1 * self.d2 + g2 * self.d1 * self.d1)

    def sin(self) -> "Jet":
        return self.map(torch.sin, torch.cos, lambda v: -torch.sin(v))

    def __mul__(self, other: "Jet") -> "Jet":
        a, b = self, other
        va, vb = a.val.unsqueeze(-2), b.val.unsqueeze(-2)
        return Jet(a.val * b.val, a.d1 * vb + va * b.d1,
                   a.d2 * vb + 2.0 * a.d1 * b.d1 + va * b.d2)

    def __add__(self, other: "Jet") -> "Jet":
        return Jet(self.val + other.val, self.d1 + other.d1, self.d2 + other.d2)

    def sum_features(self) -> "Jet":
        return Jet(self.val.sum(-1, keepdim=True), self.d1.sum(-1, keepdim=True),
                   self.d2.sum(-1, keepdim=True))

    def expand_batch(self, shape: Sequence[int]) -> "Jet":
        n, d, k = self.d1.shape[-3:]
        return Jet(self.val.expand(*shape, n, k), self.d1.expand(*shape, n, d, k),
                   self.d2.expand(*shape, n, d, k))

    @staticmethod
    def cat(jets: Sequence["Jet"]) -> "Jet":
        shape = torch.broadcast_shapes(*(j.val.shape[:-2] for j in jets))
        jets = [j.expand_batch(shape) for j in jets]
        return Jet(torch.cat([j.val for j in jets], -1), torch.cat([j.d1 for j in jets], -1),
                   torch.cat([j.d2 for j in jets], -1))

    def feature(self, i: int = 0) -> tuple[Tensor, Tensor, Tensor]:
        """Value, gradient and Laplacian of one scalar output feature."""
        return self.val[..., i], self.d1[..., i], self.d2[..., i].sum(-1)


def as_tensor(a) -> Tensor:
    """Float64 tensor view of ``a``; read-only numpy input is copied."""
    if isinstance(a, Tensor):
        return a.to(DTYPE)
    a = np.asarray(a, dtype=np.float64)
    return torch.from_numpy(a if a.flags.writeable else a.copy())


def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Xavier-normal ``(fan_out, fan_in)`` weight matrix."""
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_out, fan_in))


class MLP(nn.Module):
    """Affine layers with tanh between them; output activation tanh or linear."""

    def __init__(self, in_size: int, layer_sizes: Sequence[int], rng: np.random.Generator,
                 linear_output: bool = False):
        super().__init__()
        self.in_size = in_size
        self.layer_sizes = list(layer_sizes)
        self.linear_output = linear_output
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        fan_in = in_size
        for out in self.layer_sizes:
            self.weights.append(nn.Parameter(torch.tensor(xavier_init(fan_in, out, rng), dtype=DTYPE)))
            self.biases.append(nn.Parameter(torch.zeros(out, dtype=DTYPE)))
            fan_in = out

    @property
    def out_size(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_size:
            raise ValueError(f"MLP expects {self.in_size} input columns, got {x.shape[-1]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.nn.functional.linear(x, w, b)
            if i < last or not self.linear_output:
                x = torch.tanh(x)
        return x

    def jet(self, x: Jet) -> Jet:
        if x.val.shape[-1] != self.in_size:
            raise ValueError(f"MLP expects {self.in_size} input columns, got {x.val.shape[-1]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x.linear(w, b)
            if i < last or not self.linear_output:
                x = x.tanh()
        return x


class LayerNorm(nn.Module):
    def __init__(self, size: int, eps: float = LN_EPS):
        super().__init__()
        if size < 2:
            raise ValueError("layer norm needs at least two features")
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(size, dtype=DTYPE))

    def forward(self, v: Tensor) -> Tensor:
        mean = v.mean(-1, keepdim=True)
        var = ((v - mean) ** 2).mean(-1, keepdim=True)
        return (v - mean) / torch.sqrt(var + self.eps) * self.gain + self.bias


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def flatten_params(module: nn.Module) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(module.parameters()).detach().numpy().copy()


def unflatten_params(module: nn.Module, flat: np.ndarray) -> None:
    vec = torch.as_tensor(np.asarray(flat, dtype=np.float64))
    if vec.numel() != count_params(module):
        raise ValueError(f"parameter vector has {vec.numel()} entries, model needs {count_params(module)}")
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec, module.parameters())


def flat_grad(module: nn.Module, loss: Tensor) -> np.ndarray:
    """Gradient of a scalar loss with respect to all parameters, flattened."""
    params = list(module.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return np.concatenate([
        (g if g is not None else torch.zeros_like(p)).detach().reshape(-1).numpy()
        for g, p in zip(grads, params)
    ])


def spatial_derivatives(field: Callable[[Jet], Jet], pts) -> tuple[Tensor, Tensor, Tensor]:
    """Value, gradient and Laplacian of a scalar field built from jet operations."""
    pts = as_tensor(pts)
    return field(Jet.seed(pts)).feature(0)
