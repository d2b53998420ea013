import numpy as np
import pytest

from core.control import constant_two_control, fo_benchmark, laplace_family, manufactured_family, select_lambda
from core.errors import ConvergenceError, SpaceError
from core.mesh import PERIODIC, build_uniform_mesh
from solver.estimator import estimate
from solver.homogenization import CellProblemSpec, freeze_cell_family
from solver.mixed_solver import (ZERO_MEAN_M, MixedProblem, assemble_policy_system, b_bound_constant, error_constant,
                                 howard_solve, lipschitz_constant, monotonicity_constant,
                                 nonlinear_residual, semilinear_form, semilinear_residual, sigma_constants)
from ui.experiments import estimate_rate


def benchmark_problem(N=8, **kwargs):
    family = fo_benchmark()
    return MixedProblem(build_uniform_mesh(N, PERIODIC), family, select_lambda(family), **kwargs)


def random_fields(problem, rng, scale=1.0):
    z = scale * rng.standard_normal(problem.n_fields)
    iw = problem.space_w.integral_weights()
    for k in range(2):
        block = z[k * problem.nW:(k + 1) * problem.nW]
        block -= (iw @ block) / iw.sum()
    return z


def test_sigma_constants_range():
    for delta in (0.05, 0.5, 0.99):
        s1, s2 = sigma_constants(delta, 2.0)
        assert 0.5 < s1 < 1.0
        assert s2 > 0


def test_error_constant_increases_with_lambda():
    lams = np.logspace(-3, 3, 50)
    ce = error_constant(0.4, lams)
    assert np.all(np.diff(ce) > 0)


def test_zero_data_gives_zero_solution():
    family = laplace_family()
    problem = MixedProblem(build_uniform_mesh(4, PERIODIC), family, select_lambda(family))
    state = howard_solve(problem)
    assert state.converged
    assert np.max(np.abs(state.vector())) < 1e-12


def test_frozen_system_matches_semilinear_residual(rng):
    problem = benchmark_problem(6)
    z = random_fields(problem, rng)
    _, policy = problem.bellman(z)
    matrix, rhs = assemble_policy_system(problem, policy)
    n = problem.n_fields
    assert np.allclose(matrix[:n, :n] @ z - rhs[:n], semilinear_residual(problem, z), atol=1e-10)
    with pytest.raises(SpaceError):
        assemble_policy_system(problem, policy[:, :1])


def test_monotonicity_and_lipschitz_bounds(rng):
    problem = benchmark_problem(8)
    cm = monotonicity_constant(problem.delta)
    cl = lipschitz_constant(problem.delta, problem.lam)
    for _ in range(100):
        z1, z2, y = (random_fields(problem, rng) for _ in range(3))
        d = z1 - z2
        nd = problem.triple_norm_sq(d)
        mono = semilinear_form(problem, z1, d) - semilinear_form(problem, z2, d)
        assert mono - cm * nd >= -1e-10 * max(1.0, nd)
        lip = abs(semilinear_form(problem, z1, y) - semilinear_form(problem, z2, y))
        bound = cl * np.sqrt(nd * problem.triple_norm_sq(y))
        assert lip <= bound + 1e-10 * max(1.0, bound)


def test_miranda_talenti_type_bound(rng):
    problem = benchmark_problem(6)
    w = problem.weights.ravel()
    for rho in (0.5, 1.0, 1.5):
        for _ in range(10):
            z = rng.standard_normal(problem.n_fields)
            _, _, _, L, rot, gap = problem.qp_data(z)
            rhs = np.sum(w * rot ** 2) + np.sum(w * L ** 2) + problem.lam / rho * np.sum(w * np.sum(gap ** 2, axis=1))
            assert (2 - rho) / 2 * problem.triple_norm_sq(z) <= rhs * (1 + 1e-10)


def test_solution_is_independent_of_initial_policy():
    problem = benchmark_problem(4)
    shape = problem.weights.shape
    a = howard_solve(problem, initial_policy=np.zeros(shape, dtype=int))
    b = howard_solve(problem, initial_policy=np.ones(shape, dtype=int))
    assert np.allclose(a.u.coeffs, b.u.coeffs, atol=1e-8)
    assert nonlinear_residual(problem, a) < 1e-8


def test_policy_iteration_reports_nonconvergence():
    base = constant_two_control()
    spec = CellProblemSpec([0.0, 0.0], [0.0, 0.0], -np.eye(2), 1.0, base, select_lambda(base))
    problem = MixedProblem(build_uniform_mesh(4, PERIODIC), freeze_cell_family(spec),
                           spec.certificate.scaled(1.0))
    with pytest.raises(ConvergenceError) as info:
        howard_solve(problem, max_iter=1)
    assert info.value.state is not None
    assert howard_solve(problem).converged


def test_fixed_policy_above_tolerance_is_reported_unconverged():
    family = manufactured_family()
    problem = MixedProblem(build_uniform_mesh(4, PERIODIC), family, select_lambda(family))
    state = howard_solve(problem, tol=1e-300)
    assert not state.converged
    assert state.diagnostics()["converged"] is False
    assert state.residual_history[-1] > 1e-300
    assert howard_solve(problem, tol=1e-6).converged


def test_nontrivial_multiplier_space_solves():
    family = manufactured_family()
    problem = MixedProblem(build_uniform_mesh(8, PERIODIC), family, select_lambda(family), m_space=ZERO_MEAN_M)
    state = howard_solve(problem)
    assert state.converged
    assert state.m is not None
    assert abs(problem.space_m.integral_weights() @ state.m.coeffs) < 1e-10
    diag = state.diagnostics()
    Km = problem.space_m.stiffness_matrix()
    assert diag["grad_m_norm"] == pytest.approx(np.sqrt(state.m.coeffs @ (Km @ state.m.coeffs)), abs=1e-14)
    assert "grad_m_norm" not in howard_solve(MixedProblem(problem.mesh, family, problem.certificate)).diagnostics()


def test_coupling_form_bound(rng):
    problem = benchmark_problem(8, m_space=ZERO_MEAN_M)
    Km = problem.space_m.stiffness_matrix(problem.quad_order)
    cb = b_bound_constant(problem.lam)
    for _ in range(100):
        z = random_fields(problem, rng)
        m = rng.standard_normal(problem.nM)
        bound = cb * np.sqrt(m @ (Km @ m)) * np.sqrt(problem.triple_norm_sq(z))
        assert abs(problem.coupling_form(m, z)) <= bound * (1 + 1e-10)
    assert benchmark_problem(4).coupling_form(np.ones(3), np.ones(10)) == 0.0


def test_p2_solver_runs_on_manufactured_problem(manufactured_error):
    family = manufactured_family()
    cert = select_lambda(family)
    mesh = build_uniform_mesh(8, PERIODIC)
    e1 = manufactured_error(*_solve(MixedProblem(mesh, family, cert)))
    e2 = manufactured_error(*_solve(MixedProblem(mesh, family, cert, degree_w=2, degree_u=2)))
    assert e2 < e1


def _solve(problem):
    return problem, howard_solve(problem)


@pytest.mark.slow
def test_manufactured_convergence(manufactured_error):
    family = manufactured_family()
    cert = select_lambda(family)
    errors, roots = [], []
    for N in (8, 16, 32, 64):
        problem = MixedProblem(build_uniform_mesh(N, PERIODIC), family, cert)
        state = howard_solve(problem)
        errors.append((N, manufactured_error(problem, state)))
        roots.append((N, estimate(problem, state).sqrt_eta))
    assert -1.15 <= estimate_rate(errors) <= -0.85
    assert -1.15 <= estimate_rate(roots) <= -0.85
