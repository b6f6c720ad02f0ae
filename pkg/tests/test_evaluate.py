import numpy as np
import pytest
import torch

from conftest import tiny_config
from pilno.evaluate import (EVAL_SKIP, empirical_l2, eval_clouds, fitting_rmse, pde_errors,
                            prediction_time_ms, reference_solutions, sample_instances)
from pilno.fd import Grid, l2_norm
from pilno.lno import LNOModel
from pilno.nn import DTYPE
from pilno.training import Trainer


class ZeroModel:
    def __init__(self, conditioning="none"):
        self.config = type("C", (), {"conditioning": conditioning})()

    def predict(self, X, f, Y, cX=None, cY=None):
        return torch.zeros(len(f), len(Y), dtype=DTYPE)


@pytest.mark.parametrize("problem,cond", [("poisson", "none"), ("screened_poisson", "scalar"),
                                          ("darcy", "field")])
def test_zero_prediction_has_unit_relative_error(problem, cond):
    cfg = tiny_config(problem)
    inst = sample_instances(cfg, 3, seed=0)
    a, r = pde_errors(ZeroModel(cond), cfg, inst, 64, 24, n_target=500)
    np.testing.assert_allclose(r, 1.0, rtol=1e-12)
    _, Y = eval_clouds(cfg, 64, 500)
    refs = [s.interpolate(Y) for s in reference_solutions(problem, inst, Grid(24))]
    np.testing.assert_allclose(a, [l2_norm(u, cfg.domain.volume) for u in refs], rtol=1e-12)


def test_instances_are_seeded():
    cfg = tiny_config("darcy")
    a, b, c = (sample_instances(cfg, 4, s) for s in (1, 1, 2))
    np.testing.assert_array_equal(a.source.coeffs, b.source.coeffs)
    np.testing.assert_array_equal(a.coefficient.coeffs, b.coefficient.coeffs)
    assert not np.array_equal(a.source.coeffs, c.source.coeffs)
    assert a.coefficient.coeffs.min() >= 0.2


def test_eval_clouds_avoid_training_segments():
    cfg = tiny_config()
    X, Y = eval_clouds(cfg, 128, 256)
    tr = Trainer(cfg)
    assert not (set(map(tuple, X)) & set(map(tuple, tr.points[0].X)))
    assert not (set(map(tuple, X)) & set(map(tuple, Y)))
    assert EVAL_SKIP > 10**8


def test_fitting_rmse_and_timing():
    cfg = tiny_config("fitting")
    model = LNOModel(cfg.model, 0)
    inst = sample_instances(cfg, 3, 0)
    rmse = fitting_rmse(model, cfg, inst, 64, 200)
    assert np.isfinite(rmse) and rmse > 0
    assert prediction_time_ms(model, cfg, inst, 64, 200, repeats=3, warmup=1) > 0


def test_training_beats_untrained_model():
    cfg = tiny_config("poisson", steps=300, lr=3e-3, penalty_interval=25, batch=4)
    tr = Trainer(cfg)
    before = empirical_l2(tr.model, cfg, 6, 64, grid_n=24)
    tr.run()
    after = empirical_l2(tr.model, cfg, 6, 64, grid_n=24)
    assert after["empirical_l2"] < before["empirical_l2"]
