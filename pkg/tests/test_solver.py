import csv

import numpy as np
import pytest
import scipy.sparse as sp

from impest import estimation as est
from impest import solver
from impest.nlp import EQ, LE, ProgramBuilder, evaluate


def epigraph_lp(x_val=3.0, z=1.0, sigma=0.5):
    """min rho s.t. +-(x - z)/sigma <= rho with x fixed."""
    b = ProgramBuilder()
    x = b.add_var("x", "x", lb=x_val, ub=x_val, x0=x_val)
    r = b.add_var("rho", "m", lb=0.0, x0=1.0)
    b.add_objective(r, 1.0)
    b.add_row(LE, [(x, 1 / sigma), (r, -1.0)], const=-z / sigma)
    b.add_row(LE, [(x, -1 / sigma), (r, -1.0)], const=z / sigma)
    return b.build()


def bilinear(x0, y0):
    """min x*y on x + y = 2, 0 <= x, y <= 2, through an epigraph t >= x*y."""
    b = ProgramBuilder()
    x = b.add_var("x", "x", lb=0.0, ub=2.0, x0=x0)
    y = b.add_var("y", "y", lb=0.0, ub=2.0, x0=y0)
    t = b.add_var("t", "t", lb=-10.0, ub=10.0, x0=0.0)
    b.add_objective(t, 1.0)
    b.add_row(EQ, [(x, 1.0), (y, 1.0)], const=-2.0)
    b.add_row(LE, [(t, -1.0)], [(x, y, 1.0)])
    return b.build()


@pytest.mark.parametrize("x_val, z, sigma", [(3.0, 1.0, 0.5), (1.0, 1.0, 0.1), (-2.0, 0.5, 2.0)])
def test_epigraph_lp_gives_normalized_absolute_residual(x_val, z, sigma):
    out = solver.solve(epigraph_lp(x_val, z, sigma))
    assert out.success
    assert out.objective == pytest.approx(abs(x_val - z) / sigma, abs=1e-7)


@pytest.mark.parametrize("start, vertex", [((0.1, 1.9), (0.0, 2.0)), ((1.9, 0.1), (2.0, 0.0)),
                                           ((0.6, 1.4), (0.0, 2.0))])
def test_bilinear_reaches_the_nearer_vertex(start, vertex):
    out = solver.solve(bilinear(*start))
    assert out.success
    np.testing.assert_allclose(out.x[:2], vertex, atol=1e-6)
    assert out.objective == pytest.approx(0.0, abs=1e-6)


def test_symmetric_start_stops_at_stationary_point():
    # x = y = 1 is a KKT point of the non-convex program; a local method may stay there
    out = solver.solve(bilinear(1.0, 1.0))
    assert out.status in (solver.OPTIMAL, solver.MAX_ITER)
    assert out.max_violation <= 1e-7
    assert out.objective <= 1.0 + 1e-7


def test_reported_objective_matches_evaluate(small_feeder, small_case):
    p = est.build(small_feeder, small_case[2], est.LLE, est.BuildOptions(length_residuals="single"))
    out = solver.solve(p)
    obj, viol = evaluate(p, out.x)
    assert out.objective == pytest.approx(obj, abs=1e-9)
    assert out.max_violation == pytest.approx(viol, abs=1e-12)
    assert out.success and viol <= 1e-7


def test_solve_is_deterministic(small_feeder, small_case):
    p = est.build(small_feeder, small_case[2], est.SE)
    a, b = solver.solve(p), solver.solve(p)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations


def test_warm_start_from_solution_is_never_worse(small_feeder, small_case):
    p = est.build(small_feeder, small_case[2], est.IME_TRANSPOSED)
    cold = solver.solve(p)
    warm = solver.solve(p, solver.SolverOptions(warm_start=cold.x))
    assert warm.success
    assert warm.objective <= cold.objective + 1e-7
    assert warm.iterations <= cold.iterations


def test_warm_start_dimension_checked(small_feeder, small_case):
    p = est.build(small_feeder, small_case[2], est.SE)
    with pytest.raises(ValueError):
        solver.solve(p, solver.SolverOptions(warm_start=np.zeros(p.n - 1)))


@pytest.mark.parametrize("kw", [{"tol": 0.0}, {"tol": -1.0}, {"max_iter": -1}])
def test_options_validation(kw):
    with pytest.raises(ValueError):
        solver.SolverOptions(**kw)


def test_iteration_limit_status(small_feeder, small_case):
    p = est.build(small_feeder, small_case[2], est.IME_UNTRANSPOSED)
    out = solver.solve(p, solver.SolverOptions(max_iter=2))
    assert out.status == solver.MAX_ITER and not out.success
    assert out.iterations == 2


def test_time_limit_status(small_feeder, small_case):
    p = est.build(small_feeder, small_case[2], est.IME_UNTRANSPOSED)
    out = solver.solve(p, solver.SolverOptions(time_limit=0.0))
    assert out.status == solver.TIME_LIMIT


def test_contradictory_equalities_detected():
    b = ProgramBuilder()
    x = b.add_var("x", "x", lb=-5.0, ub=5.0)
    y = b.add_var("y", "y", lb=-5.0, ub=5.0)
    b.add_objective(x, 1.0)
    b.add_row(EQ, [], [(x, x, 1.0), (y, y, 1.0)], const=1.0)  # x^2 + y^2 = -1
    out = solver.solve(b.build(), solver.SolverOptions(max_iter=200))
    assert not out.success
    assert out.status in (solver.INFEASIBLE, solver.NUMERICAL, solver.MAX_ITER)


def test_all_fixed_program():
    b = ProgramBuilder()
    x = b.add_var("x", "x", lb=1.0, ub=1.0, x0=1.0)
    b.add_objective(x, 2.0)
    out = solver.solve(b.build())
    assert out.success and out.iterations == 0
    assert out.objective == 2.0


def test_fixed_variable_stays_at_its_value():
    out = solver.solve(epigraph_lp(3.0))
    assert out.x[0] == 3.0


def test_log_written_with_verbosity(tmp_path, small_feeder, small_case):
    p = est.build(small_feeder, small_case[2], est.SE)
    path = tmp_path / "log.csv"
    out = solver.solve(p, solver.SolverOptions(verbosity=1, log_path=str(path)))
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == solver.LOG_COLUMNS
    assert len(rows) == len(out.log) >= out.iterations
    quiet = tmp_path / "quiet.csv"
    solver.solve(p, solver.SolverOptions(verbosity=0, log_path=str(quiet)))
    assert not quiet.exists()


# -- derivative checker -------------------------------------------------------------

def test_derivatives_of_linear_program_are_exact():
    p = epigraph_lp()
    assert solver.check_derivatives(p, np.array([3.0, 0.7])) <= 1e-10


def test_derivatives_of_bilinear_program(rng):
    p = bilinear(0.3, 1.7)
    for _ in range(5):
        assert solver.check_derivatives(p, rng.uniform(-2, 2, p.n), fd_step=1e-6) <= 1e-6


def test_derivatives_of_estimation_program(small_feeder, small_case, rng):
    p = est.build(small_feeder, small_case[2], est.IME_TRANSPOSED)
    assert solver.check_derivatives(p, p.x0 + rng.normal(0, 0.05, p.n), fd_step=1e-6) <= 1e-6


def test_checker_detects_corrupted_entry(rng):
    p = bilinear(0.3, 1.7)
    x = rng.uniform(0.5, 1.5, p.n)
    J = p.jacobian(x).toarray()
    J[1, 0] += 0.5
    assert solver.check_derivatives(p, x, jacobian=sp.csr_matrix(J)) >= 1e-2


def test_hessian_matches_finite_difference_of_jacobian(small_feeder, small_case, rng):
    p = est.build(small_feeder, small_case[2], est.LLE, est.BuildOptions(length_residuals="single"))
    x = p.x0 + rng.normal(0, 0.05, p.n)
    lam = rng.normal(size=p.m)
    H = p.hessian(lam).toarray()
    h = 1e-6
    for j in rng.choice(p.n, 20, replace=False):
        e = np.zeros(p.n)
        e[j] = h
        col = (p.jacobian(x + e).T @ lam - p.jacobian(x - e).T @ lam) / (2 * h)
        np.testing.assert_allclose(H[:, j], col, atol=1e-6)


# -- epigraph polishing --------------------------------------------------------------

def test_polish_lowers_slack_and_raises_violated_epigraph():
    p = epigraph_lp(3.0, 1.0, 0.5)
    assert solver.polish_epigraph(p, np.array([3.0, 9.0]))[1] == pytest.approx(4.0)
    assert solver.polish_epigraph(p, np.array([3.0, 3.9]))[1] == pytest.approx(4.0)


def test_polish_moves_only_epigraph_variables():
    # t bounds a product from above and qualifies; x and y sit in the equality row and do not
    p = bilinear(0.5, 1.5)
    out = solver.polish_epigraph(p, np.array([0.5, 1.5, 3.0]))
    np.testing.assert_array_equal(out[:2], [0.5, 1.5])
    assert out[2] == pytest.approx(0.75)
