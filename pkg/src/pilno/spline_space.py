"""Tensor-product B-spline function spaces and streaming input statistics.

Order follows the "order K = degree K-1" convention: K=3 is the quadratic
spline. A 1-D space with ``r`` interior knots splits the core interval into
``r+1`` uniform cells and carries ``r+K`` basis functions; the uniform knot
spacing is continued ``K-1`` knots past each end so every core point sees
exactly ``K`` active basis functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, EmptyStreamError

NORMALIZE_EPS = 1e-8


@dataclass(frozen=True)
class SplineBasis1D:
    order: int
    interior_knots: int
    a: float = -0.5
    b: float = 0.5

    def __post_init__(self):
        if self.order < 1 or self.interior_knots < 0:
            raise ConfigurationError("need order >= 1 and interior_knots >= 0")
        if not self.a < self.b:
            raise ConfigurationError("empty core interval")

    @property
    def cells(self) -> int:
        return self.interior_knots + 1

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.cells

    @property
    def basis_count(self) -> int:
        return self.interior_knots + self.order

    @property
    def knots(self) -> np.ndarray:
        g = self.order - 1
        return self.a + self.h * np.arange(-g, self.cells + g + 1, dtype=np.float64)

    def span(self, x: np.ndarray) -> np.ndarray:
        """Index of the cell holding each x; the right end belongs to the last cell."""
        x = np.asarray(x, dtype=np.float64)
        if np.any(~((x >= self.a) & (x <= self.b))):
            bad = x[~((x >= self.a) & (x <= self.b))].ravel()[0]
            raise DomainError(f"x={bad} outside core interval [{self.a}, {self.b}]")
        j = np.floor((x - self.a) / self.h).astype(np.int64)
        return np.clip(j, 0, self.cells - 1)

    def active(self, x, nderiv: int = 0):
        """Active basis values and derivatives at x.

        Returns ``(first, ders)`` where ``first`` is the index of the first of
        the K active functions and ``ders[k, ..., i]`` is the k-th derivative
        of basis function ``first + i``. Cox-de Boor triangle restricted to the
        active span, derivatives by the standard difference recurrence.
        """
        x = np.asarray(x, dtype=np.float64)
        K, p = self.order, self.order - 1
        j = self.span(x)
        t = self.knots
        # knot index of the left end of cell j
        mu = j + p
        left = np.empty((p + 1,) + x.shape)
        right = np.empty((p + 1,) + x.shape)
        ndu = np.empty((K, K) + x.shape)
        ndu[0, 0] = 1.0
        for q in range(1, K):
            left[q] = x - t[mu + 1 - q]
            right[q] = t[mu + q] - x
            saved = np.zeros(x.shape)
            for r in range(q):
                ndu[q, r] = right[r + 1] + left[q - r]
                tmp = ndu[r, q - 1] / ndu[q, r]
                ndu[r, q] = saved + right[r + 1] * tmp
                saved = left[q - r] * tmp
            ndu[q, q] = saved

        nd = min(nderiv, p)
        ders = np.zeros((nderiv + 1, K) + x.shape)
        for r in range(K):
            ders[0, r] = ndu[r, p]
        for r in range(K):
            s1, s2 = 0, 1
            a = np.zeros((2, K) + x.shape)
            a[0, 0] = 1.0
            for k in range(1, nd + 1):
                d = np.zeros(x.shape)
                rk, pk = r - k, p - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for jj in range(j1, j2 + 1):
                    a[s2, jj] = (a[s1, jj] - a[s1, jj - 1]) / ndu[pk + 1, rk + jj]
                    d = d + a[s2, jj] * ndu[rk + jj, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d = d + a[s2, k] * ndu[r, pk]
                ders[k, r] = d
                s1, s2 = s2, s1
        fac = p
        for k in range(1, nd + 1):
            ders[k] *= fac
            fac *= p - k
        return j, np.moveaxis(ders, 1, -1)


def basis_eval_1d(basis: SplineBasis1D, x: float) -> tuple[int, np.ndarray]:
    first, ders = basis.active(np.float64(x))
    return int(first), ders[0]


@dataclass(frozen=True)
class SplineSpace:
    """d-fold tensor product of identical 1-D bases over a box."""

    order: int = 3
    interior_knots: int = 10
    lower: tuple[float, ...] = (-0.5, -0.5)
    upper: tuple[float, ...] = (0.5, 0.5)

    @property
    def bases(self) -> tuple[SplineBasis1D, ...]:
        return tuple(SplineBasis1D(self.order, self.interior_knots, lo, hi)
                     for lo, hi in zip(self.lower, self.upper))

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b.basis_count for b in self.bases)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def design(self, pts: np.ndarray, nderiv: int = 0) -> np.ndarray:
        """Dense design matrices ``D[k, i, n, m]``.

        ``D[0]`` maps flattened coefficients to values (shape ``(1, N, size)``).
        For ``k >= 1``, ``D[k, i]`` gives the k-th derivative along axis i only.
        """
        pts = np.atleast_2d(pts)
        n = pts.shape[0]
        per_axis = [b.active(pts[:, i], nderiv) for i, b in enumerate(self.bases)]
        K = self.order
        out = np.zeros((nderiv + 1, self.d, n, self.size))
        rows = np.arange(n)
        shape = self.shape
        for offs in np.ndindex(*(K,) * self.d):
            flat = np.zeros(n, dtype=np.int64)
            for ax, o in enumerate(offs):
                flat = flat * shape[ax] + per_axis[ax][0] + o
            for k in range(nderiv + 1):
                for i in range(self.d):
                    if k == 0 and i > 0:
                        continue
                    w = np.ones(n)
                    for ax, o in enumerate(offs):
                        kk = k if ax == i else 0
                        w = w * per_axis[ax][1][kk, :, o]
                    np.add.at(out[k, i], (rows, flat), w)
        out[0, 1:] = out[0, 0]
        return out

    def sample_coeffs(self, rng: np.random.Generator, count: int | None = None,
                      dist: str = "normal", a: float = 0.0, b: float = 1.0) -> np.ndarray:
        shape = self.shape if count is None else (count,) + self.shape
        if dist == "normal":
            return rng.standard_normal(shape)
        if dist == "uniform":
            if not a < b:
                raise ConfigurationError(f"uniform coefficient range needs a < b, got [{a}, {b}]")
            return rng.uniform(a, b, size=shape)
        raise ConfigurationError(f"unknown coefficient distribution {dist!r}")


@dataclass(frozen=True)
class SplineFunction:
    space: SplineSpace
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != self.space.shape:
            raise ConfigurationError(f"coefficients {self.coeffs.shape} != space {self.space.shape}")

    def _gather(self, pts, nderiv):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        act = [b.active(pts[:, i], nderiv) for i, b in enumerate(self.space.bases)]
        return pts, act

    def __call__(self, pts) -> np.ndarray:
        return self.eval(pts)

    def eval(self, pts) -> np.ndarray:
        pts, act = self._gather(pts, 0)
        K = self.space.order
        out = np.zeros(pts.shape[0])
        for offs in np.ndindex(*(K,) * self.space.d):
            idx = tuple(a[0] + o for a, o in zip(act, offs))
            w = math.prod(a[1][0, :, o] for a, o in zip(act, offs))
            out += self.coeffs[idx] * w
        return out

    def derivatives(self, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values, gradient ``(N, d)`` and pure second derivatives ``(N, d)``."""
        pts, act = self._gather(pts, 2)
        K, d = self.space.order, self.space.d
        n = pts.shape[0]
        val, grad, hdiag = np.zeros(n), np.zeros((n, d)), np.zeros((n, d))
        for offs in np.ndindex(*(K,) * d):
            c = self.coeffs[tuple(a[0] + o for a, o in zip(act, offs))]
            vals = [a[1][:, :, o] for a, o in zip(act, offs)]
            val += c * math.prod(v[0] for v in vals)
            for i in range(d):
                rest = math.prod(v[0] for ax, v in enumerate(vals) if ax != i)
                grad[:, i] += c * vals[i][1] * rest
                hdiag[:, i] += c * vals[i][2] * rest
        return val, grad, hdiag

    def eval_gradient(self, pts) -> np.ndarray:
        if self.space.order < 2:
            raise ConfigurationError("gradient needs order >= 2")
        return self.derivatives(pts)[1]


def sample_coeffs(space: SplineSpace, rng: np.random.Generator, dist: str = "normal",
                  a: float = 0.0, b: float = 1.0) -> np.ndarray:
    return space.sample_coeffs(rng, None, dist, a, b)


@dataclass
class RunningMoments:
    """Streaming mean and population variance (Welford, with Chan's merge)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values) -> "RunningMoments":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return self
        bm = v.mean()
        other = RunningMoments(v.size, float(bm), float(((v - bm) ** 2).sum()))
        return self.merge(other, inplace=True)

    def merge(self, other: "RunningMoments", inplace: bool = False) -> "RunningMoments":
        n = self.count + other.count
        if n == 0:
            res = RunningMoments()
        else:
            delta = other.mean - self.mean
            mean = self.mean + delta * other.count / n
            m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
            res = RunningMoments(n, mean, m2)
        if inplace:
            self.count, self.mean, self.m2 = res.count, res.mean, res.m2
            return self
        return res

    def finalize(self) -> tuple[float, float]:
        if self.count == 0:
            raise EmptyStreamError("no values seen")
        return self.mean, self.m2 / self.count


def welford_update(m: RunningMoments, values) -> RunningMoments:
    return RunningMoments(m.count, m.mean, m.m2).update(values)


def welford_finalize(m: RunningMoments) -> tuple[float, float]:
    return m.finalize()


def normalize_inputs(values, mean: float, variance: float):
    return (values - mean) / math.sqrt(variance + NORMALIZE_EPS)
