"""``pilno`` command line: train, eval, solve-fd, predict, inspect.

Set ``PILNO_THREADS`` to pin the number of torch intra-op threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import EvalSection, ExperimentConfig, load_config
from .errors import CheckpointError, ConfigurationError, PilnoError
from .evaluate import (eval_clouds, fitting_rmse, pde_errors, prediction_time_ms,
                       sample_instances)
from .fd import Grid, solve_darcy_fd, solve_poisson_fd, solve_screened_fd
from .geometry import sobol_points
from .physics import constant_field, gaussian_field, linear_field, sin_field
from .training import Trainer, load_checkpoint, write_records

log = logging.getLogger("pilno")

CHECKPOINT = "checkpoint.pilno"
# slope and offset of the linearly varying diffusion coefficient case
LINEAR_C = ((0.6, 0.0), 0.6)
CONSTANT_C = 0.6


def _set_threads() -> None:
    n = os.environ.get("PILNO_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ConfigurationError(f"PILNO_THREADS must be an integer, got {n!r}") from None


def _write_csv(path: Path, header, rows) -> None:
    rows = [list(r) for r in rows]
    for r in rows:
        for v in r:
            if isinstance(v, float) and not np.isfinite(v):
                raise PilnoError(f"refusing to write non-finite value to {path}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _bundle_config(bundle: Path) -> ExperimentConfig:
    return load_config(bundle / "config.json")


# -- train ----------------------------------------------------------------


def cmd_train(args) -> int:
    exp = load_config(args.config)
    if args.seed is not None:
        exp.train.seed = args.seed
    if args.steps is not None:
        exp.train.steps = args.steps
    cfg = exp.train_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(exp.model_dump_json(indent=2))
    t0 = time.perf_counter()
    trainer = Trainer(cfg)
    trainer.run(checkpoint_path=out / CHECKPOINT)
    wall = time.perf_counter() - t0
    trainer.save(out / CHECKPOINT)
    write_records(trainer.records, out / "train_log.csv")
    meta = {
        "seed": cfg.seed,
        "version": __version__,
        "host": platform.node(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "wall_time_s": wall,
        "steps": trainer.step,
        "param_count": trainer.model.param_count(),
        "problem": cfg.problem,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2))
    last = trainer.records[-1] if trainer.records else None
    print(f"trained {cfg.problem} for {trainer.step} steps in {wall:.1f}s"
          + (f", final loss {last.total:.4e}" if last else "") + f" -> {out}")
    return 0


# -- eval -----------------------------------------------------------------


def cmd_eval(args) -> int:
    bundle = Path(args.bundle)
    exp = _bundle_config(bundle)
    ev: EvalSection = exp.eval
    sweep = args.sweep_N or ev.sweep_n
    samples = args.samples or ev.samples
    grid_n = args.grid or ev.grid
    trainer = load_checkpoint(bundle / CHECKPOINT)
    cfg, model = trainer.config, trainer.model
    inst = sample_instances(cfg, samples, ev.seed)
    rows = []
    for n in sweep:
        ms = prediction_time_ms(model, cfg, inst, n, ev.n_target, repeats=args.repeats)
        if cfg.problem == "fitting":
            rmse = fitting_rmse(model, cfg, inst, n, ev.n_target)
            rows.append([n, samples, "", rmse, "", "", ms])
        else:
            a, r = pde_errors(model, cfg, inst, n, grid_n, ev.n_target)
            rows.append([n, samples, grid_n, "", float(r.mean()), float(a.mean()), ms])
        print(f"N={n}: " + ", ".join(f"{h}={v}" for h, v in zip(EVAL_HEADER[3:], rows[-1][3:]) if v != ""))
    out = Path(args.out) if args.out else bundle / "metrics.csv"
    _write_csv(out, EVAL_HEADER, rows)
    return 0


EVAL_HEADER = ["n_sensor", "samples", "grid", "rmse", "mean_relative_l2", "empirical_l2",
               "cpu_prediction_ms"]


# -- solve-fd -------------------------------------------------------------


def _parse_field(spec: str):
    """``sin:K``, ``gaussian``, ``const:V`` or ``linear:A,B,C`` (A x1 + B x2 + C)."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "sin":
            return sin_field(int(arg or 1))
        if kind == "gaussian":
            return gaussian_field()
        if kind == "const":
            return constant_field(float(arg))
        if kind == "linear":
            a, b, c = (float(v) for v in arg.split(","))
            return linear_field((a, b), c)
    except ValueError:
        pass
    raise ConfigurationError(f"cannot parse field spec {spec!r}")


def cmd_solve_fd(args) -> int:
    grid = Grid(args.grid)
    f = _parse_field(args.source)
    if args.problem == "poisson":
        sol = solve_poisson_fd(grid, f.fn)
    elif args.problem == "screened_poisson":
        sol = solve_screened_fd(grid, f.fn, args.s)
    elif args.problem == "darcy":
        sol = solve_darcy_fd(grid, f.fn, _parse_field(args.coefficient).fn)
    else:
        raise ConfigurationError(f"no FD solver for {args.problem!r}")
    sol.to_csv(args.out)
    print(f"wrote {args.problem} FD solution on a {args.grid}x{args.grid} grid -> {args.out}")
    return 0


# -- predict --------------------------------------------------------------


def _structured_case(problem: str, case: str, s: float):
    """Source field, coefficient field and reference function for a named case."""
    kind, _, arg = case.partition(":")
    if kind == "sin":
        k = int(arg or 2)
        if k < 2 or k % 2:
            raise ConfigurationError("sin case needs an even k >= 2 (zero boundary values)")
        f = sin_field(k)
        c = constant_field(1.0) if problem == "darcy" else None
        if problem == "fitting":
            return f, c, f.fn
        amp = 1.0 / (2 * (k * np.pi) ** 2 + (s if problem == "screened_poisson" else 0.0))
        return f, c, lambda Y: amp * sin_field(k).fn(Y)
    if kind in ("gaussian", "linear-c"):
        f = gaussian_field()
        c = None
        if problem == "darcy":
            c = linear_field(*LINEAR_C) if kind == "linear-c" else constant_field(CONSTANT_C)
        elif kind == "linear-c":
            raise ConfigurationError("the linear-c case needs a Darcy model")
        return f, c, None
    raise ConfigurationError(f"unknown case {case!r}; use sin:K, gaussian or linear-c")


@torch.no_grad()
def cmd_predict(args) -> int:
    bundle = Path(args.bundle)
    trainer = load_checkpoint(bundle / CHECKPOINT)
    cfg, model = trainer.config, trainer.model
    n_sensor = args.n_sensor or cfg.n_sensor
    f, c, exact = _structured_case(cfg.problem, args.case, args.s)
    X, _ = eval_clouds(cfg, n_sensor, 1)
    Y = sobol_points(args.targets, cfg.domain, 2**27).coords if args.targets else Grid(args.grid).nodes(False)
    cX = cY = None
    if cfg.problem == "screened_poisson":
        cX = cY = np.array([args.s])
    elif cfg.problem == "darcy":
        cX, cY = c.values(X), c.values(Y)
    pred = model.predict(X, f.values(X), Y, cX, cY)[0].numpy()
    if exact is not None:
        ref, label = exact(Y), "exact"
    else:
        grid = Grid(args.grid)
        if cfg.problem == "darcy":
            sol = solve_darcy_fd(grid, f.fn, c.fn)
        elif cfg.problem == "screened_poisson":
            sol = solve_screened_fd(grid, f.fn, args.s)
        elif cfg.problem == "poisson":
            sol = solve_poisson_fd(grid, f.fn)
        else:
            sol = None
        ref, label = (f.fn(Y), "exact") if sol is None else (sol.interpolate(Y), "reference")
    err = np.abs(pred - ref)
    _write_csv(Path(args.out), ["x", "y", "pred", label, "abs_err"],
               (map(float, r) for r in np.c_[Y, pred, ref, err]))
    print(f"{args.case}: max abs err {err.max():.4e}, relative L2 "
          f"{np.linalg.norm(pred - ref) / max(np.linalg.norm(ref), 1e-300):.4e} -> {args.out}")
    return 0


# -- inspect --------------------------------------------------------------


def cmd_inspect(args) -> int:
    path = Path(args.path)
    ckpt = path / CHECKPOINT if path.is_dir() else path
    trainer = load_checkpoint(ckpt)
    cfg = trainer.config
    info = {
        "checkpoint": str(ckpt),
        "problem": cfg.problem,
        "step": trainer.step,
        "steps": cfg.steps,
        "param_count": trainer.model.param_count(),
        "model": cfg.model.to_dict(),
        "normalization": [float(trainer.model.input_mean), float(trainer.model.input_var)],
    }
    if trainer.records:
        last = trainer.records[-1]
        info["last_record"] = {"step": last.step, "j_pde": last.j_pde, "j_b": last.j_b,
                               "lambda": last.lam, "total": last.total}
    meta = path / "metadata.json"
    if path.is_dir() and meta.exists():
        info["metadata"] = json.loads(meta.read_text())
    print(json.dumps(info, indent=2))
    return 0


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pilno", description="Low-rank neural operator experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an operator and write a result bundle")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and timing over a sensor-count sweep")
    p.add_argument("bundle", type=Path)
    p.add_argument("--sweep-N", dest="sweep_N", type=int, nargs="+")
    p.add_argument("--samples", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--repeats", type=int, default=100, help="timed predictions per N")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve-fd", help="finite-difference reference solution")
    p.add_argument("--problem", required=True, choices=["poisson", "screened_poisson", "darcy"])
    p.add_argument("--source", default="sin:2", help="sin:K | gaussian | const:V | linear:A,B,C")
    p.add_argument("--s", type=float, default=0.0)
    p.add_argument("--coefficient", default="const:1", help="diffusion coefficient spec (Darcy)")
    p.add_argument("--grid", type=int, default=250)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_solve_fd)

    p = sub.add_parser("predict", help="predict a structured test case")
    p.add_argument("bundle", type=Path)
    p.add_argument("--case", default="sin:2", help="sin:K | gaussian | linear-c")
    p.add_argument("--s", type=float, default=0.0, help="screening parameter")
    p.add_argument("--grid", type=int, default=125)
    p.add_argument("--n-sensor", type=int)
    p.add_argument("--targets", type=int, default=0, help="Sobol targets instead of grid nodes")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="summarize a bundle or checkpoint")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except FileNotFoundError as exc:
        ap.error(f"file not found: {exc.filename}")
    except (ConfigurationError, CheckpointError) as exc:
        ap.error(str(exc))
    except PilnoError as exc:
        print(f"pilno: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
