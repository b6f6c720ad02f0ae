"""Second-order finite-difference reference solvers on uniform grids.

A grid with ``n`` cells per side has ``(n-1)^2`` interior unknowns; boundary
nodes carry the homogeneous Dirichlet value 0. Systems are factorized once
per operator (sparse LU) so many right-hand sides reuse one factorization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError, NumericalFailure

Field = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, float]

RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class Grid:
    n: int
    lower: float = -0.5
    upper: float = 0.5

    def __post_init__(self):
        if self.n < 2:
            raise ConfigurationError("grid needs at least 2 cells per side")

    @property
    def h(self) -> float:
        return (self.upper - self.lower) / self.n

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n + 1)

    def nodes(self, interior: bool = True) -> np.ndarray:
        """Node coordinates, x1-major (row index is the x1 node)."""
        ax = self.axis[1:-1] if interior else self.axis
        g1, g2 = np.meshgrid(ax, ax, indexing="ij")
        return np.c_[g1.ravel(), g2.ravel()]

    @property
    def metadata(self) -> dict:
        return {"cells_per_side": self.n, "interior_unknowns_per_side": self.n - 1, "h": self.h}


@dataclass(frozen=True)
class GridSolution:
    grid: Grid
    u: np.ndarray  # (n+1, n+1) nodal values including the zero boundary

    def interpolate(self, pts) -> np.ndarray:
        ax = self.grid.axis
        interp = RegularGridInterpolator((ax, ax), self.u, method="linear")
        return interp(np.clip(np.asarray(pts, dtype=np.float64), ax[0], ax[-1]))

    @property
    def interior(self) -> np.ndarray:
        return self.u[1:-1, 1:-1]

    def to_csv(self, path) -> None:
        pts = self.grid.nodes(interior=False)
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "u"])
            for (x, y), v in zip(pts, self.u.ravel()):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def _nodal(grid: Grid, f: Field, interior: bool = True) -> np.ndarray:
    m = grid.n - 1 if interior else grid.n + 1
    if callable(f):
        vals = np.asarray(f(grid.nodes(interior)), dtype=np.float64)
    elif np.isscalar(f):
        vals = np.full(m * m, float(f))
    else:
        vals = np.asarray(f, dtype=np.float64)
    if vals.size != m * m:
        raise ConfigurationError(f"field needs {m * m} nodal values, got {vals.size}")
    return vals.ravel()


@lru_cache(maxsize=8)
def _laplacian(n: int, h: float) -> sp.csc_matrix:
    m = n - 1
    T = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(m, m))
    eye = sp.identity(m)
    return ((sp.kron(T, eye) + sp.kron(eye, T)) / (h * h)).tocsc()


@lru_cache(maxsize=8)
def _factor(n: int, h: float, s: float):
    A = _laplacian(n, h)
    if s:
        A = (A + s * sp.identity(A.shape[0])).tocsc()
    return A, spla.splu(A)


def darcy_matrix(grid: Grid, c_nodal: np.ndarray) -> sp.csr_matrix:
    """Conservative 5-point operator for ``-div(c grad u)``; face c is the arithmetic mean."""
    n, h = grid.n, grid.h
    c = c_nodal.reshape(n + 1, n + 1)
    if np.any(c <= 0):
        raise ConfigurationError("diffusion coefficient must be positive")
    m = n - 1
    idx = np.arange(m * m).reshape(m, m)
    I, J = np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="ij")
    ce = 0.5 * (c[I, J] + c[I + 1, J])
    cw = 0.5 * (c[I, J] + c[I - 1, J])
    cn = 0.5 * (c[I, J] + c[I, J + 1])
    cs = 0.5 * (c[I, J] + c[I, J - 1])
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [(ce + cw + cn + cs).ravel()]
    for coef, di, dj in ((ce, 1, 0), (cw, -1, 0), (cn, 0, 1), (cs, 0, -1)):
        ii, jj = I - 1 + di, J - 1 + dj
        ok = (ii >= 0) & (ii < m) & (jj >= 0) & (jj < m)
        rows.append(idx[ok])
        cols.append(idx[ii[ok], jj[ok]])
        vals.append(-coef[ok])
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m * m, m * m))
    return (A / (h * h)).tocsr()


def _finish(grid: Grid, A, u: np.ndarray, rhs: np.ndarray) -> GridSolution:
    res = np.linalg.norm(A @ u - rhs)
    scale = max(np.linalg.norm(rhs), 1.0)
    if not np.isfinite(res) or res > RESIDUAL_TOL * scale:
        raise NumericalFailure(f"finite-difference solve (residual {res:.3e})")
    full = np.zeros((grid.n + 1, grid.n + 1))
    full[1:-1, 1:-1] = u.reshape(grid.n - 1, grid.n - 1)
    return GridSolution(grid, full)


def solve_poisson_fd(grid: Grid, f: Field) -> GridSolution:
    return solve_screened_fd(grid, f, 0.0)


def solve_screened_fd(grid: Grid, f: Field, s: float) -> GridSolution:
    if s < 0:
        raise ConfigurationError("screening coefficient must be nonnegative")
    rhs = _nodal(grid, f)
    A, lu = _factor(grid.n, grid.h, float(s))
    return _finish(grid, A, lu.solve(rhs), rhs)


def solve_darcy_fd(grid: Grid, f: Field, c: Field) -> GridSolution:
    rhs = _nodal(grid, f)
    A = darcy_matrix(grid, _nodal(grid, c, interior=False)).tocsc()
    u = spla.splu(A).solve(rhs)
    return _finish(grid, A, u, rhs)


def analytic_sin_solution(k: int, X) -> np.ndarray:
    """Exact Poisson solution for the source ``sin(k pi x1) sin(k pi x2)``."""
    X = np.asarray(X, dtype=np.float64)
    w = k * np.pi
    return np.sin(w * X[:, 0]) * np.sin(w * X[:, 1]) / (2 * w * w)


def l2_norm(values, volume: float = 1.0, weights=None) -> float:
    """Monte-Carlo L2 norm ``sqrt(|Omega|/n * sum v^2)`` (or with explicit weights)."""
    v = np.asarray(values, dtype=np.float64)
    w = np.full(v.shape[-1], volume / v.shape[-1]) if weights is None else np.asarray(weights)
    return float(np.sqrt((w * v * v).sum()))


def relative_l2(u_pred, u_ref, weights=None) -> float:
    u_pred, u_ref = np.asarray(u_pred, dtype=np.float64), np.asarray(u_ref, dtype=np.float64)
    ref = l2_norm(u_ref, weights=weights)
    if ref == 0:
        raise ZeroDivisionError("reference field has zero L2 norm")
    return l2_norm(u_pred - u_ref, weights=weights) / ref
