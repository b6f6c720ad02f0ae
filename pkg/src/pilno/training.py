"""Stochastic training loop and checkpoint container.

Every source of randomness is an independent numpy stream spawned from the
master seed (init, coefficients, points, conditioning, warm-up), so a
training trajectory is a pure function of the config. Checkpoints capture
the full loop state, and resuming reproduces an uninterrupted run bit-exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CheckpointError, ConfigurationError, NumericalFailure
from .geometry import Domain, boundary_points, sobol_points
from .lno import LNOConfig, LNOModel
from .nn import DTYPE
from .optim import make_optimizer
from .physics import (PROBLEMS, PDEProblem, PenaltySchedule, SplineBatch, j_mse, j_pi,
                      make_batch)
from .spline_space import RunningMoments, SplineSpace

log = logging.getLogger(__name__)

MAGIC = b"PILNOCKP"
VERSION = 1
CSV_HEADER = ["step", "j_pde", "j_b", "lambda", "total", "wall_ms"]


class ProblemMismatch(CheckpointError):
    pass


@dataclass
class SplineSpec:
    order: int = 3
    knots: int = 10
    dist: str = "normal"
    low: float = 0.0
    high: float = 1.0

    def space(self, domain: Domain) -> SplineSpace:
        return SplineSpace(self.order, self.knots, domain.lower, domain.upper)


@dataclass
class TrainConfig:
    problem: str = "poisson"
    model: LNOConfig = field(default_factory=LNOConfig)
    steps: int = 1000
    lr: float = 5e-4
    optimizer: str = "muon"
    batch: int = 30
    n_sensor: int = 2**10
    n_target: int = 2**9
    n_boundary: int = 2**8
    resample_interval: int = 500
    lam0: float = 0.1
    penalty_interval: Optional[int] = None
    lam_max: float = 1000.0
    source: SplineSpec = field(default_factory=SplineSpec)
    coefficient: SplineSpec = field(default_factory=lambda: SplineSpec(3, 5, "uniform", 0.2, 1.0))
    s_range: tuple[float, float] = (0.0, 30.0)
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0
    warmup_functions: int = 1000
    per_instance_points: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = LNOConfig(**self.model)
        if isinstance(self.source, dict):
            self.source = SplineSpec(**self.source)
        if isinstance(self.coefficient, dict):
            self.coefficient = SplineSpec(**self.coefficient)
        self.s_range = tuple(self.s_range)
        if self.problem not in PROBLEMS:
            raise ConfigurationError(f"unknown problem {self.problem!r}")
        counts = dict(steps=self.steps + 1, batch=self.batch, n_sensor=self.n_sensor,
                      n_target=self.n_target, n_boundary=self.n_boundary,
                      resample_interval=self.resample_interval, log_interval=self.log_interval,
                      warmup_functions=self.warmup_functions)
        bad = [k for k, v in counts.items() if v < 1]
        if bad:
            raise ConfigurationError(f"counts must be >= 1: {bad}")
        want = {"screened_poisson": "scalar", "darcy": "field"}.get(self.problem, "none")
        if self.model.conditioning != want:
            raise ConfigurationError(f"{self.problem} requires model conditioning {want!r}")

    @property
    def domain(self) -> Domain:
        return Domain(self.model.lower, self.model.upper)

    @property
    def schedule(self) -> PenaltySchedule:
        interval = self.penalty_interval or max(1, self.steps // 12)
        return PenaltySchedule(self.lam0, interval, self.lam_max)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        out["s_range"] = list(self.s_range)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainRecord:
    step: int
    j_pde: float
    j_b: float
    lam: float
    total: float
    wall_ms: float = 0.0

    def losses(self) -> tuple:
        return (self.step, self.j_pde, self.j_b, self.lam, self.total)


def write_records(records: list[TrainRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.step, repr(r.j_pde), repr(r.j_b), repr(r.lam), repr(r.total),
                        f"{r.wall_ms:.3f}"])


def read_records(path) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainRecord(int(r["step"]), float(r["j_pde"]), float(r["j_b"]), float(r["lambda"]),
                        float(r["total"]), float(r["wall_ms"])) for r in rows]


@dataclass
class PointSets:
    X: np.ndarray
    Y: np.ndarray
    Yb: np.ndarray
    designs: dict = field(default_factory=dict, repr=False)


def resample_points(config: TrainConfig, block: int, rng: np.random.Generator) -> PointSets:
    """Fresh sensor/target/boundary clouds.

    Sensor and target clouds are disjoint consecutive Sobol segments; block
    ``k`` starts at index ``k * (N + M)``.
    """
    dom = config.domain
    N, M = config.n_sensor, config.n_target
    skip = block * (N + M)
    X = sobol_points(N, dom, skip).coords
    Y = sobol_points(M, dom, skip + N).coords
    Yb = boundary_points(config.n_boundary, dom, rng).coords
    return PointSets(np.array(X), np.array(Y), Yb)


class Trainer:
    """Holds the full mutable training state; ``run`` advances it."""

    def __init__(self, config: TrainConfig, _fresh: bool = True):
        self.config = config
        self.problem = PDEProblem(config.problem if config.problem != "fitting" else "poisson",
                                  config.domain, config.s_range)
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        init_rng, self.coef_rng, self.point_rng, self.cond_rng, warm_rng = (
            np.random.Generator(np.random.PCG64(s)) for s in seeds)
        self.model = LNOModel(config.model, init_rng)
        names = [n for n, _ in self.model.named_parameters()]
        self.optimizer = make_optimizer(config.optimizer, list(self.model.parameters()),
                                        config.lr, names=names)
        self.source_space = config.source.space(config.domain)
        self.coef_space = config.coefficient.space(config.domain)
        self.step = 0
        self.block = 0
        self.records: list[TrainRecord] = []
        self.points: list[PointSets] = []
        if _fresh:
            self._resample()
            self._warmup(warm_rng)

    # -- sampling ---------------------------------------------------------

    def _resample(self) -> None:
        count = self.config.batch if self.config.per_instance_points else 1
        self.points = []
        for _ in range(count):
            self.points.append(resample_points(self.config, self.block, self.point_rng))
            self.block += 1

    def _designs(self, ps: PointSets) -> dict:
        if not ps.designs:
            ps.designs["fX"] = self.source_space.design(ps.X)
            ps.designs["fY"] = self.source_space.design(ps.Y)
            if self.config.problem == "darcy":
                ps.designs["cX"] = self.coef_space.design(ps.X)
                ps.designs["cY"] = self.coef_space.design(ps.Y, 2)
                ps.designs["cYb"] = self.coef_space.design(ps.Yb)
        return ps.designs

    def _warmup(self, rng: np.random.Generator) -> None:
        moments = RunningMoments()
        ps = self.points[0]
        D = self._designs(ps)["fX"]
        left = self.config.warmup_functions
        while left > 0:
            k = min(left, 100)
            src = SplineBatch(self.source_space, self._draw_source(rng, k))
            moments.update(src.values(ps.X, D))
            left -= k
        mean, var = moments.finalize()
        self.model.set_normalization(mean, var)

    def _draw_source(self, rng, count):
        s = self.config.source
        return self.source_space.sample_coeffs(rng, count, s.dist, s.low, s.high)

    def sample_batch(self, ps: PointSets, count: int):
        source = SplineBatch(self.source_space, self._draw_source(self.coef_rng, count))
        s = coefficient = None
        if self.config.problem == "screened_poisson":
            s = self.cond_rng.uniform(*self.config.s_range, size=count)
        elif self.config.problem == "darcy":
            cs = self.config.coefficient
            coefficient = SplineBatch(self.coef_space, self.coef_space.sample_coeffs(
                self.cond_rng, count, cs.dist, cs.low, cs.high))
        return make_batch(ps.X, ps.Y, source, ps.Yb, s=s, coefficient=coefficient,
                          designs=self._designs(ps))

    # -- loop -------------------------------------------------------------

    def loss(self, batch, lam: float):
        if self.config.problem == "fitting":
            j = j_mse(self.model, batch)
            return j, j, torch.zeros((), dtype=DTYPE)
        return j_pi(self.problem, self.model, batch, lam)

    def _step_losses(self, lam: float):
        if self.config.per_instance_points:
            parts = [self.loss(self.sample_batch(ps, 1), lam) for ps in self.points]
            return tuple(sum(p[i] for p in parts) / len(parts) for i in range(3))
        return self.loss(self.sample_batch(self.points[0], self.config.batch), lam)

    def run(self, until: int | None = None, checkpoint_path=None) -> list[TrainRecord]:
        cfg = self.config
        until = cfg.steps if until is None else min(until, cfg.steps)
        schedule = cfg.schedule
        params = list(self.model.parameters())
        t0 = time.perf_counter()
        # the entry state is known good; refreshed at every logged step
        last_good = self.to_bytes() if checkpoint_path is not None else None
        while self.step < until:
            step = self.step
            if step > 0 and step % cfg.resample_interval == 0:
                self._resample()
            lam = 0.0 if cfg.problem == "fitting" else schedule.at(step)
            total, jp, jb = self._step_losses(lam)
            if not torch.isfinite(total):
                self._abort(last_good, checkpoint_path, step)
            grads = torch.autograd.grad(total, params)
            try:
                self.optimizer.step(grads)
            except NumericalFailure as exc:
                exc.step = step
                self._abort(last_good, checkpoint_path, step, exc)
            self.step += 1
            if step % cfg.log_interval == 0 or self.step == cfg.steps:
                rec = TrainRecord(step, float(jp.detach()), float(jb.detach()), lam, float(total.detach()),
                                  1e3 * (time.perf_counter() - t0))
                self.records.append(rec)
                log.info("step %d total %.4e pde %.4e b %.4e lam %.3g", *rec.losses())
                if checkpoint_path is not None:
                    last_good = self.to_bytes()
            if cfg.checkpoint_interval and checkpoint_path is not None \
                    and self.step % cfg.checkpoint_interval == 0:
                self.save(checkpoint_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.records

    def _abort(self, last_good, path, step, exc=None):
        if last_good is not None and path is not None:
            _atomic_write(path, last_good)
        raise exc or NumericalFailure("training loss", step)

    # -- checkpoints ------------------------------------------------------

    def to_bytes(self) -> bytes:
        arrays = {
            "params": torch.nn.utils.parameters_to_vector(self.model.parameters()).detach().numpy(),
            "optimizer": np.concatenate([t.reshape(-1).numpy() for t in self.optimizer.state_tensors()])
            if self.optimizer.state_tensors() else np.zeros(0),
        }
        for i, ps in enumerate(self.points):
            arrays[f"X{i}"], arrays[f"Y{i}"], arrays[f"Yb{i}"] = ps.X, ps.Y, ps.Yb
        header = {
            "config": self.config.to_dict(),
            "step": self.step,
            "block": self.block,
            "optimizer_step": self.optimizer.t,
            "normalization": [float(self.model.input_mean), float(self.model.input_var)],
            "rng": {k: getattr(self, k).bit_generator.state
                    for k in ("coef_rng", "point_rng", "cond_rng")},
            "records": [asdict(r) for r in self.records],
            "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
            "param_order": [[n, list(p.shape)] for n, p in self.model.named_parameters()],
        }
        hdr = json.dumps(header, sort_keys=True).encode()
        payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
        crc = zlib.crc32(hdr + payload)
        return MAGIC + struct.pack("<IQQI", VERSION, len(hdr), len(payload), crc) + hdr + payload

    def save(self, path) -> None:
        _atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, problem: str | None = None) -> "Trainer":
        if blob[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            version, hlen, plen, crc = struct.unpack("<IQQI", blob[8:32])
        except struct.error as exc:
            raise CheckpointError("truncated checkpoint header") from exc
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
        body = blob[32:]
        if len(body) != hlen + plen or zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint corrupt (length or checksum mismatch)")
        header = json.loads(body[:hlen])
        config = TrainConfig.from_dict(header["config"])
        if problem is not None and config.problem != problem:
            raise ProblemMismatch(f"checkpoint holds a {config.problem!r} run, expected {problem!r}")
        arrays, off = {}, hlen
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
        tr = cls(config, _fresh=False)
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(torch.as_tensor(arrays["params"]), tr.model.parameters())
        tr.model.set_normalization(*header["normalization"])
        opt_flat = torch.as_tensor(arrays["optimizer"])
        tensors, k = [], 0
        for t in tr.optimizer.state_tensors():
            tensors.append(opt_flat[k:k + t.numel()].reshape(t.shape))
            k += t.numel()
        tr.optimizer.load_state(header["optimizer_step"], tensors)
        for k, state in header["rng"].items():
            getattr(tr, k).bit_generator.state = state
        tr.step, tr.block = header["step"], header["block"]
        tr.records = [TrainRecord(**r) for r in header["records"]]
        i = 0
        while f"X{i}" in arrays:
            tr.points.append(PointSets(arrays[f"X{i}"], arrays[f"Y{i}"], arrays[f"Yb{i}"]))
            i += 1
        return tr


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(trainer: Trainer, path) -> None:
    trainer.save(path)


def load_checkpoint(path, problem: str | None = None) -> Trainer:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Trainer.from_bytes(blob, problem)


def train(config: TrainConfig, checkpoint_path=None) -> tuple[LNOModel, list[TrainRecord]]:
    tr = Trainer(config)
    records = tr.run(checkpoint_path=checkpoint_path)
    return tr.model, records
