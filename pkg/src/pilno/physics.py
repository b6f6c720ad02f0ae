"""PDE residuals, training objectives and the boundary penalty schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from .errors import ConditionMismatch, ConfigurationError
from .geometry import Domain
from .nn import DTYPE
from .spline_space import SplineSpace

PROBLEMS = ("fitting", "poisson", "screened_poisson", "darcy")


# -- batched input fields ------------------------------------------------


class SplineBatch:
    """``p`` spline functions over one space; evaluation through dense design matrices."""

    def __init__(self, space: SplineSpace, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape[1:] != space.shape:
            raise ConfigurationError(f"coefficients {coeffs.shape[1:]} do not match space {space.shape}")
        self.space = space
        self.coeffs = coeffs
        self._flat = coeffs.reshape(coeffs.shape[0], -1)

    def __len__(self) -> int:
        return self.coeffs.shape[0]

    def values(self, pts, design: np.ndarray | None = None) -> np.ndarray:
        D = self.space.design(pts, 0) if design is None else design
        return self._flat @ D[0, 0].T

    def derivatives(self, pts, design: np.ndarray | None = None):
        D = self.space.design(pts, 2) if design is None else design
        val = self._flat @ D[0, 0].T
        grad = np.einsum("pm,inm->pni", self._flat, D[1])
        hdiag = np.einsum("pm,inm->pni", self._flat, D[2])
        return val, grad, hdiag


@dataclass
class AnalyticField:
    """Single closed-form field with optional analytic derivatives."""

    fn: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hdiag: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __len__(self) -> int:
        return 1

    def values(self, pts, design=None) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(pts)), dtype=np.float64)[None]

    def derivatives(self, pts, design=None):
        if self.grad is None or self.hdiag is None:
            raise ConfigurationError("field has no analytic derivatives")
        pts = np.asarray(pts)
        return self.values(pts), self.grad(pts)[None], self.hdiag(pts)[None]


def constant_field(c: float) -> AnalyticField:
    return AnalyticField(lambda x: np.full(len(x), c), lambda x: np.zeros_like(x),
                         lambda x: np.zeros_like(x))


def linear_field(slope: tuple[float, ...], offset: float) -> AnalyticField:
    g = np.asarray(slope, dtype=np.float64)
    return AnalyticField(lambda x: x @ g + offset, lambda x: np.broadcast_to(g, x.shape).copy(),
                         lambda x: np.zeros_like(x))


def sin_field(k: int) -> AnalyticField:
    """``sin(k pi x1) sin(k pi x2)`` with derivatives."""
    w = k * np.pi

    def fn(x):
        return np.sin(w * x[:, 0]) * np.sin(w * x[:, 1])

    def grad(x):
        s, c = np.sin(w * x), np.cos(w * x)
        return w * np.c_[c[:, 0] * s[:, 1], s[:, 0] * c[:, 1]]

    def hdiag(x):
        return -w * w * np.repeat(fn(x)[:, None], 2, axis=1)

    return AnalyticField(fn, grad, hdiag)


def gaussian_field(center=(0.7, 0.0), scale: float = 2.0) -> AnalyticField:
    """``exp(-scale * |x - center|^2)``."""
    c = np.asarray(center, dtype=np.float64)

    def fn(x):
        return np.exp(-scale * ((x - c) ** 2).sum(1))

    def grad(x):
        return -2 * scale * (x - c) * fn(x)[:, None]

    def hdiag(x):
        r = x - c
        return (4 * scale**2 * r**2 - 2 * scale) * fn(x)[:, None]

    return AnalyticField(fn, grad, hdiag)


# -- problems and batches ------------------------------------------------


@dataclass(frozen=True)
class PDEProblem:
    kind: str = "poisson"
    domain: Domain = field(default_factory=Domain.box)
    s_range: tuple[float, float] = (0.0, 30.0)

    def __post_init__(self):
        if self.kind not in PROBLEMS:
            raise ConfigurationError(f"unknown problem kind {self.kind!r}")
        if self.s_range[0] < 0 or self.s_range[0] > self.s_range[1]:
            raise ConfigurationError("screening range must satisfy 0 <= lo <= hi")

    @property
    def conditioning(self) -> str:
        return {"screened_poisson": "scalar", "darcy": "field"}.get(self.kind, "none")


@dataclass
class Batch:
    """Tensors for one loss evaluation; points are shared across the ``p`` instances."""

    X: Tensor
    Y: Tensor
    fX: Tensor
    fY: Tensor
    Yb: Optional[Tensor] = None
    s: Optional[Tensor] = None
    cX: Optional[Tensor] = None
    cY: Optional[tuple[Tensor, Tensor, Tensor]] = None
    cYb: Optional[Tensor] = None

    @property
    def p(self) -> int:
        return self.fX.shape[0]

    def cond_x(self, kind: str):
        return {"none": None, "scalar": self.s, "field": self.cX}[kind]

    def cond_y(self, kind: str):
        return {"none": None, "scalar": self.s, "field": None if self.cY is None else self.cY[0]}[kind]

    def cond_y_jet(self, kind: str):
        return {"none": None, "scalar": self.s, "field": self.cY}[kind]

    def cond_b(self, kind: str):
        return {"none": None, "scalar": self.s, "field": self.cYb}[kind]


def _t(a) -> Tensor:
    return torch.tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


def make_batch(X, Y, source, Yb=None, s=None, coefficient=None, designs: dict | None = None) -> Batch:
    """Evaluate batched fields on the point sets.

    ``designs`` may hold precomputed design matrices keyed ``"fX"``, ``"fY"``,
    ``"cX"``, ``"cY"``, ``"cYb"``.
    """
    designs = designs or {}
    X, Y = np.asarray(X), np.asarray(Y)
    b = Batch(_t(X), _t(Y), _t(source.values(X, designs.get("fX"))),
              _t(source.values(Y, designs.get("fY"))))
    if Yb is not None:
        b.Yb = _t(Yb)
    if s is not None:
        b.s = _t(np.atleast_1d(s))
    if coefficient is not None:
        b.cX = _t(coefficient.values(X, designs.get("cX")))
        b.cY = tuple(_t(a) for a in coefficient.derivatives(Y, designs.get("cY")))
        if Yb is not None:
            b.cYb = _t(coefficient.values(Yb, designs.get("cYb")))
    return b


# -- residuals and losses ------------------------------------------------


def _check_cond(problem: PDEProblem, model, batch: Batch) -> str:
    kind = model.config.conditioning
    if kind != problem.conditioning:
        raise ConditionMismatch(f"{problem.kind} needs {problem.conditioning} conditioning, model has {kind}")
    if kind == "scalar" and batch.s is None:
        raise ConditionMismatch("screened Poisson batch lacks s")
    if kind == "field" and (batch.cX is None or batch.cY is None):
        raise ConditionMismatch("Darcy batch lacks coefficient fields")
    return kind


def pde_operator(kind: str, u, grad_u, lap_u, s=None, c=None):
    """Apply the differential operator L to jet data of u."""
    if kind == "poisson":
        return -lap_u
    if kind == "screened_poisson":
        return -lap_u + s[:, None] * u
    if kind == "darcy":
        cv, cg, _ = c
        return -((cg * grad_u).sum(-1) + cv * lap_u)
    raise ConfigurationError(f"no differential operator for {kind!r}")


def residual(problem: PDEProblem, model, batch: Batch, z: Tensor | None = None) -> Tensor:
    """Pointwise residual ``L(u)(y) - f(y)`` at interior targets, shape ``(p, M)``."""
    kind = _check_cond(problem, model, batch)
    if z is None:
        z = model.encode(batch.X, batch.fX, batch.cond_x(kind))
    u, g, lap = model.decode_jet(z, batch.Y, batch.cond_y_jet(kind))
    r = pde_operator(problem.kind, u, g, lap, s=batch.s, c=batch.cY) - batch.fY
    return r


def j_pde(problem: PDEProblem, model, batch: Batch, z: Tensor | None = None) -> Tensor:
    if batch.Y.shape[0] == 0:
        raise ValueError("no interior target points")
    return (residual(problem, model, batch, z) ** 2).mean(-1).mean()


def j_b(model, batch: Batch, z: Tensor | None = None) -> Tensor:
    if batch.Yb is None or batch.Yb.shape[0] == 0:
        raise ValueError("no boundary target points")
    kind = model.config.conditioning
    if z is None:
        z = model.encode(batch.X, batch.fX, batch.cond_x(kind))
    u = model.decode(z, batch.Yb, batch.cond_b(kind))
    return (u**2).mean(-1).mean()


def j_pi(problem: PDEProblem, model, batch: Batch, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """``(J_PDE + lam * J_B, J_PDE, J_B)`` sharing one encoder pass."""
    z = model.encode(batch.X, batch.fX, batch.cond_x(model.config.conditioning))
    jp = j_pde(problem, model, batch, z)
    jb = j_b(model, batch, z)
    return jp + lam * jb, jp, jb


def j_mse(model, batch: Batch) -> Tensor:
    u = model.predict(batch.X, batch.fX, batch.Y)
    return ((u - batch.fY) ** 2).mean(-1).mean()


@dataclass(frozen=True)
class PenaltySchedule:
    lam0: float = 0.1
    interval: int = 1000
    lam_max: float = 1000.0

    def __post_init__(self):
        if self.lam0 <= 0 or self.interval < 1 or self.lam_max < self.lam0:
            raise ConfigurationError("penalty schedule needs lam0 > 0, interval >= 1, lam_max >= lam0")

    def at(self, step: int) -> float:
        # no doublings past the first one that reaches lam_max, so huge steps cannot overflow
        k = min(step // self.interval, math.ceil(math.log2(self.lam_max / self.lam0)))
        return min(self.lam0 * 2.0**k, self.lam_max)


def penalty_at(schedule: PenaltySchedule, step: int) -> float:
    return schedule.at(step)
