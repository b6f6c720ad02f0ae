import numpy as np
import pytest
import sympy as sy

from pilno.errors import ConfigurationError
from pilno.fd import (Grid, analytic_sin_solution, darcy_matrix, l2_norm, relative_l2,
                      solve_darcy_fd, solve_poisson_fd, solve_screened_fd)

x1, x2 = sy.symbols("x1 x2")
U_EXACT = sy.sin(2 * sy.pi * x1) * sy.sin(2 * sy.pi * x2) * sy.exp(x1 - x2)


def manufactured(c_expr, s=0):
    """Source for -div(c grad u) + s u = f with the exact u above (symbolic oracle)."""
    flux = [c_expr * sy.diff(U_EXACT, v) for v in (x1, x2)]
    f = -(sy.diff(flux[0], x1) + sy.diff(flux[1], x2)) + s * U_EXACT
    to_np = lambda e: sy.lambdify((x1, x2), e, "numpy")
    return (lambda X, g=to_np(f): g(X[:, 0], X[:, 1]) + 0 * X[:, 0],
            lambda X, g=to_np(U_EXACT): g(X[:, 0], X[:, 1]),
            lambda X, g=to_np(c_expr): g(X[:, 0], X[:, 1]) + 0 * X[:, 0])


def max_error(solve, u, n):
    sol = solve(Grid(n))
    return np.abs(sol.interior.ravel() - u(Grid(n).nodes())).max()


@pytest.mark.parametrize("kind", ["poisson", "screened", "darcy"])
def test_second_order_convergence(kind):
    if kind == "poisson":
        f, u, _ = manufactured(sy.Integer(1))
        solve = lambda g: solve_poisson_fd(g, f)
    elif kind == "screened":
        f, u, _ = manufactured(sy.Integer(1), s=12)
        solve = lambda g: solve_screened_fd(g, f, 12.0)
    else:
        f, u, c = manufactured(1 + sy.Rational(1, 2) * x1 + sy.Rational(1, 4) * sy.sin(3 * x2))
        solve = lambda g: solve_darcy_fd(g, f, c)
    errs = [max_error(solve, u, n) for n in (32, 64, 128)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(3.6 <= r <= 4.4 for r in ratios), ratios


def unit_source_center(terms=400):
    """Series value of the f=1 solution at the centre of the unit square."""
    total = 0.0
    for m in range(1, terms, 2):
        n = np.arange(1, terms, 2)
        total += np.sum(16 / (np.pi**4 * m * n * (m * m + n * n))
                        * np.sin(m * np.pi / 2) * np.sin(n * np.pi / 2))
    return total


def test_unit_source_peak():
    sol = solve_poisson_fd(Grid(250), 1.0)
    peak = sol.u.max()
    assert sol.u[125, 125] == peak
    assert abs(peak - unit_source_center()) < 2e-6
    assert abs(peak - 0.073671) < 1e-4


@pytest.mark.parametrize("k", [2, 4])
def test_sin_source_matches_closed_form(k):
    g = Grid(250)
    w = k * np.pi
    sol = solve_poisson_fd(g, lambda X: np.sin(w * X[:, 0]) * np.sin(w * X[:, 1]))
    err = np.abs(sol.u.ravel() - analytic_sin_solution(k, g.nodes(False))).max()
    assert err <= 5e-4


def test_zero_source_and_constant_coefficient():
    g = Grid(40)
    assert not solve_poisson_fd(g, 0.0).u.any()
    f = lambda X: np.cos(X[:, 0]) + X[:, 1] ** 2
    np.testing.assert_allclose(solve_darcy_fd(g, f, 2.5).u, solve_poisson_fd(g, f).u / 2.5,
                               rtol=1e-10, atol=1e-14)


def test_darcy_matrix_symmetric_positive():
    g = Grid(12)
    c = 0.3 + np.random.default_rng(0).uniform(size=(13 * 13))
    A = darcy_matrix(g, c).toarray()
    np.testing.assert_allclose(A, A.T, atol=1e-9)
    assert np.linalg.eigvalsh(A).min() > 0


def test_validation():
    with pytest.raises(ConfigurationError):
        Grid(1)
    with pytest.raises(ConfigurationError):
        solve_screened_fd(Grid(8), 1.0, -1.0)
    with pytest.raises(ConfigurationError):
        solve_darcy_fd(Grid(8), 1.0, -0.5)
    with pytest.raises(ConfigurationError):
        solve_poisson_fd(Grid(8), np.ones(5))


def test_interpolation_and_csv(tmp_path):
    g = Grid(20)
    sol = solve_poisson_fd(g, 1.0)
    np.testing.assert_allclose(sol.interpolate(g.nodes(False)), sol.u.ravel(), atol=1e-15)
    sol.to_csv(tmp_path / "u.csv")
    data = np.loadtxt(tmp_path / "u.csv", delimiter=",", skiprows=1)
    assert data.shape == (21 * 21, 3)
    np.testing.assert_array_equal(data[:, 2], sol.u.ravel())
    assert open(tmp_path / "u.csv").readline().strip() == "x,y,u"


def test_norms():
    assert l2_norm(np.full(100, 2.0), volume=1.0) == pytest.approx(2.0)
    assert relative_l2([1.0, 1.0], [2.0, 2.0]) == pytest.approx(0.5)
    with pytest.raises(ZeroDivisionError):
        relative_l2([1.0], [0.0])


def test_strong_screening_respects_maximum_principle_bound():
    f = lambda X: np.cos(3 * X[:, 0]) + 0.5 * X[:, 1]
    grid = Grid(64)
    bound = np.abs(f(grid.nodes())).max()
    for s in (100.0, 1e3, 1e4):
        assert np.abs(solve_screened_fd(grid, f, s).u).max() <= bound / s * (1 + 1e-12)


def _spline_field(seed, knots, low, high):
    from pilno.physics import SplineBatch
    from pilno.spline_space import SplineSpace
    space = SplineSpace(3, knots)
    batch = SplineBatch(space, space.sample_coeffs(np.random.default_rng(seed), 1, "uniform", low, high))
    return lambda X: batch.values(X)[0]


@pytest.mark.parametrize("seed", range(4))
def test_darcy_discrete_maximum_principle(seed):
    c = _spline_field(seed, 5, 0.2, 1.0)
    f = _spline_field(100 + seed, 10, 0.05, 1.0)
    grid = Grid(80)
    pos = solve_darcy_fd(grid, f, c).u
    neg = solve_darcy_fd(grid, lambda X: -f(X), c).u
    assert pos.min() >= -1e-14 and pos.max() > 0
    assert neg.max() <= 1e-14
    np.testing.assert_allclose(neg, -pos, rtol=0, atol=1e-15)


def test_sin_closed_form_point_and_boundary():
    assert analytic_sin_solution(2, [[0.25, 0.25]])[0] == pytest.approx(1 / (8 * np.pi**2), abs=1e-7)
    assert abs(analytic_sin_solution(2, [[0.25, 0.25]])[0] - 0.0126651) < 1e-7
    edge = np.linspace(-0.5, 0.5, 21)
    for k in (2, 4, 6):
        rim = np.r_[np.c_[edge, -0.5 + 0 * edge], np.c_[edge, 0.5 + 0 * edge],
                    np.c_[-0.5 + 0 * edge, edge], np.c_[0.5 + 0 * edge, edge]]
        assert np.abs(analytic_sin_solution(k, rim)).max() < 1e-15
        x = np.random.default_rng(k).uniform(-0.5, 0.5, (20, 2))
        h = 1e-4
        u = lambda p: analytic_sin_solution(k, p)
        lap = sum(u(x + e) - 2 * u(x) + u(x - e) for e in (np.array([h, 0]), np.array([0, h]))) / h**2
        src = np.sin(k * np.pi * x[:, 0]) * np.sin(k * np.pi * x[:, 1])
        np.testing.assert_allclose(-lap, src, atol=1e-5)


def test_monte_carlo_norm_and_relative_error():
    X = np.random.default_rng(0).uniform(-0.5, 0.5, (100_000, 2))
    g = X[:, 0] + X[:, 1] + 1
    assert abs(l2_norm(g) / np.sqrt(7 / 6) - 1) < 0.01
    assert relative_l2(g, g) == 0.0
    assert relative_l2(2 * g, g) == pytest.approx(1.0, rel=1e-14)
