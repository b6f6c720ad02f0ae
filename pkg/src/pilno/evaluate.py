"""Accuracy and timing metrics for trained operators."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .fd import Grid, GridSolution, relative_l2, l2_norm, solve_darcy_fd, solve_screened_fd
from .geometry import sobol_points
from .nn import as_tensor
from .physics import SplineBatch
from .training import TrainConfig

EVAL_TARGETS = 10_000
# sensor/target clouds for evaluation come from a Sobol segment far beyond
# anything a training run of sane length touches
EVAL_SKIP = 2**28


@dataclass
class EvalInstances:
    """``p`` sampled problem instances: sources plus optional conditioning."""

    source: SplineBatch
    s: Optional[np.ndarray] = None
    coefficient: Optional[SplineBatch] = None

    def __len__(self) -> int:
        return len(self.source)


def sample_instances(config: TrainConfig, count: int, seed: int) -> EvalInstances:
    rng = np.random.default_rng([seed, 0xE7A1])
    dom = config.domain
    space = config.source.space(dom)
    src = SplineBatch(space, space.sample_coeffs(rng, count, config.source.dist,
                                                 config.source.low, config.source.high))
    inst = EvalInstances(src)
    if config.problem == "screened_poisson":
        inst.s = rng.uniform(*config.s_range, size=count)
    elif config.problem == "darcy":
        cs = config.coefficient
        cspace = cs.space(dom)
        inst.coefficient = SplineBatch(cspace, cspace.sample_coeffs(rng, count, cs.dist, cs.low, cs.high))
    return inst


def eval_clouds(config: TrainConfig, n_sensor: int, n_target: int = EVAL_TARGETS):
    dom = config.domain
    X = sobol_points(n_sensor, dom, EVAL_SKIP).coords
    Y = sobol_points(n_target, dom, EVAL_SKIP + 2**26).coords
    return X, Y


def _conds(model, inst: EvalInstances, X, Y, sl=slice(None)):
    kind = model.config.conditioning
    if kind == "scalar":
        return inst.s[sl], inst.s[sl]
    if kind == "field":
        c = inst.coefficient
        return c.values(X)[sl], c.values(Y)[sl]
    return None, None


@torch.no_grad()
def predict_instances(model, inst: EvalInstances, X, Y, chunk: int = 25) -> np.ndarray:
    out = []
    fX = inst.source.values(X)
    cX, cY = _conds(model, inst, X, Y)
    for lo in range(0, len(inst), chunk):
        sl = slice(lo, lo + chunk)
        out.append(model.predict(X, fX[sl], Y,
                                 None if cX is None else cX[sl],
                                 None if cY is None else cY[sl]).numpy())
    return np.concatenate(out)


def reference_solutions(problem: str, inst: EvalInstances, grid: Grid) -> list[GridSolution]:
    nodes = grid.nodes()
    f = inst.source.values(nodes)
    sols = []
    for i in range(len(inst)):
        if problem == "darcy":
            c = inst.coefficient.values(grid.nodes(interior=False))[i]
            sols.append(solve_darcy_fd(grid, f[i], c))
        else:
            s = 0.0 if inst.s is None else float(inst.s[i])
            sols.append(solve_screened_fd(grid, f[i], s))
    return sols


def pde_errors(model, config: TrainConfig, inst: EvalInstances, n_sensor: int, grid_n: int,
               n_target: int = EVAL_TARGETS) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance absolute and relative L2 errors against FD references."""
    X, Y = eval_clouds(config, n_sensor, n_target)
    pred = predict_instances(model, inst, X, Y)
    vol = config.domain.volume
    abs_err, rel_err = [], []
    for u_pred, sol in zip(pred, reference_solutions(config.problem, inst, Grid(grid_n))):
        ref = sol.interpolate(Y)
        abs_err.append(l2_norm(u_pred - ref, vol))
        rel_err.append(relative_l2(u_pred, ref))
    return np.asarray(abs_err), np.asarray(rel_err)


def empirical_l2(model, config: TrainConfig, samples: int, n_sensor: int | None = None,
                 grid_n: int = 125, seed: int = 1) -> dict:
    inst = sample_instances(config, samples, seed)
    a, r = pde_errors(model, config, inst, n_sensor or config.n_sensor, grid_n)
    return {"empirical_l2": float(a.mean()), "mean_relative_l2": float(r.mean())}


def fitting_rmse(model, config: TrainConfig, inst: EvalInstances, n_sensor: int,
                 n_target: int = EVAL_TARGETS) -> float:
    """Square root of the mean-squared fitting error over all instances and targets."""
    X, Y = eval_clouds(config, n_sensor, n_target)
    pred = predict_instances(model, inst, X, Y)
    return float(np.sqrt(((pred - inst.source.values(Y)) ** 2).mean()))


@torch.no_grad()
def prediction_time_ms(model, config: TrainConfig, inst: EvalInstances, n_sensor: int,
                       n_target: int = EVAL_TARGETS, repeats: int = 100, warmup: int = 10) -> float:
    """Median wall time of one single-instance prediction (CPU)."""
    X, Y = eval_clouds(config, n_sensor, n_target)
    fX = inst.source.values(X)[:1]
    cX, cY = _conds(model, inst, X, Y, slice(0, 1))
    Xt, Yt, ft = (as_tensor(a) for a in (X, Y, fX))
    times = []
    for i in range(warmup + repeats):
        t = time.perf_counter()
        model.predict(Xt, ft, Yt, cX, cY)
        if i >= warmup:
            times.append(time.perf_counter() - t)
    return 1e3 * float(np.median(times))
