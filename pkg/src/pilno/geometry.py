"""Box domains, point clouds and point samplers.

Interior clouds come from an unscrambled Sobol sequence (Joe-Kuo direction
numbers, origin included as point 0). Boundary clouds are drawn uniformly in
arc length along the perimeter of a 2-D box.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError

# Joe & Kuo (2008) "new-joe-kuo-6.21201", dimensions 2..10: (s, a, m_1..m_s).
# Dimension 1 is the van der Corput sequence in base 2.
_JOE_KUO = [
    (1, 0, (1,)),
    (2, 1, (1, 3)),
    (3, 1, (1, 3, 1)),
    (3, 2, (1, 1, 1)),
    (4, 1, (1, 1, 3, 3)),
    (4, 4, (1, 3, 5, 13)),
    (5, 2, (1, 1, 5, 5, 17)),
    (5, 4, (1, 1, 5, 5, 5)),
    (5, 7, (1, 1, 7, 11, 19)),
]
_BITS = 32
MAX_SOBOL_DIM = len(_JOE_KUO) + 1


class Role(str, Enum):
    SENSOR = "sensor"
    TARGET = "target"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class Domain:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ConfigurationError("domain corners must have equal, nonzero length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigurationError(f"degenerate domain {self.lower} .. {self.upper}")

    @classmethod
    def box(cls, lo: float = -0.5, hi: float = 0.5, d: int = 2) -> "Domain":
        return cls((float(lo),) * d, (float(hi),) * d)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def on_boundary(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        touching = np.any((pts == lo) | (pts == hi), axis=-1)
        return touching & self.contains(pts)


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    role: Role = Role.SENSOR

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[0] < 1:
            raise ConfigurationError(f"point cloud needs shape (N>=1, d), got {self.coords.shape}")
        self.coords.setflags(write=False)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]


def _direction_numbers(d: int) -> np.ndarray:
    """Direction integers V[dim, bit] scaled to ``_BITS`` bits."""
    V = np.zeros((d, _BITS), dtype=np.uint64)
    V[0] = [1 << (_BITS - 1 - j) for j in range(_BITS)]
    for k in range(1, d):
        s, a, m = _JOE_KUO[k - 1]
        v = [mi << (_BITS - 1 - j) for j, mi in enumerate(m)]
        for j in range(s, _BITS):
            nxt = v[j - s] ^ (v[j - s] >> s)
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    nxt ^= v[j - i]
            v.append(nxt)
        V[k] = v[:_BITS]
    return V


def sobol_unit(n: int, d: int, skip: int = 0) -> np.ndarray:
    """Points ``skip .. skip+n-1`` of the d-dimensional Sobol sequence in [0, 1)^d."""
    if n < 1:
        raise ConfigurationError("need at least one point")
    if not 1 <= d <= MAX_SOBOL_DIM:
        raise ConfigurationError(f"Sobol dimension {d} unsupported (1..{MAX_SOBOL_DIM})")
    if skip < 0 or skip + n > 2**_BITS:
        raise ConfigurationError("Sobol index range exceeds 2^32")
    V = _direction_numbers(d)
    idx = np.arange(skip, skip + n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    x = np.zeros((n, d), dtype=np.uint64)
    for j in range(_BITS):
        bit = ((gray >> np.uint64(j)) & np.uint64(1)).astype(bool)
        x[bit] ^= V[:, j]
    return x.astype(np.float64) / float(2**_BITS)


def sobol_points(n: int, domain: Domain, skip: int = 0, role: Role = Role.SENSOR) -> PointCloud:
    u = sobol_unit(n, domain.d, skip)
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    return PointCloud(lo + u * (hi - lo), role)


def boundary_points(n: int, domain: Domain, rng: np.random.Generator) -> PointCloud:
    """Uniform points on the perimeter of a 2-D box, parameterized by arc length."""
    if domain.d != 2:
        raise ConfigurationError("boundary sampling is implemented for d=2 only")
    if n < 1:
        raise ConfigurationError("need at least one point")
    (x0, y0), (x1, y1) = domain.lower, domain.upper
    w, h = x1 - x0, y1 - y0
    s = rng.uniform(0.0, 2 * (w + h), size=n)
    pts = np.empty((n, 2))
    # edges in order: bottom, right, top, left
    e0, e1, e2 = w, w + h, 2 * w + h
    bottom = s < e0
    right = (s >= e0) & (s < e1)
    top = (s >= e1) & (s < e2)
    left = s >= e2
    pts[bottom] = np.c_[x0 + s[bottom], np.full(bottom.sum(), y0)]
    pts[right] = np.c_[np.full(right.sum(), x1), y0 + (s[right] - e0)]
    pts[top] = np.c_[x1 - (s[top] - e1), np.full(top.sum(), y1)]
    pts[left] = np.c_[np.full(left.sum(), x0), y1 - (s[left] - e2)]
    np.clip(pts, domain.lower, domain.upper, out=pts)
    return PointCloud(pts, Role.BOUNDARY)
