import numpy as np
import pytest

from core.control import laplace_family, manufactured_family, select_lambda
from core.mesh import PERIODIC, build_uniform_mesh
from solver.estimator import efficiency_constant, efficiency_terms, estimate, reliability_bound
from solver.mixed_solver import MixedProblem, howard_solve


def solved(family, N):
    problem = MixedProblem(build_uniform_mesh(N, PERIODIC), family, select_lambda(family))
    return problem, howard_solve(problem)


@pytest.fixture(scope="module")
def manufactured():
    return solved(manufactured_family(), 8)


def test_zero_data_has_zero_estimator():
    problem, state = solved(laplace_family(), 4)
    report = estimate(problem, state)
    assert report.eta == 0.0
    assert report.sqrt_eta == 0.0


def test_discrete_exact_solution_has_vanishing_estimator():
    family = laplace_family(lambda x, y, alpha: np.ones(np.shape(y)[:-1]), name="unit-source")
    problem, state = solved(family, 4)
    assert np.allclose(state.u.coeffs, 1.0)
    assert estimate(problem, state).eta <= 1e-18


def test_local_terms_sum_to_total(manufactured):
    problem, state = manufactured
    report = estimate(problem, state)
    assert report.local.shape == (problem.mesh.n_elements, 3)
    assert np.isclose(report.local.sum(), report.eta)
    assert np.isclose(report.term_F + report.term_rot + report.term_gap, report.eta)
    half = problem.mesh.n_elements // 2
    first, _ = report.subset(np.arange(half))
    second, parts = report.subset(np.arange(half, problem.mesh.n_elements))
    assert np.isclose(first + second, report.eta)
    assert parts.shape == (3,)
    assert set(report.as_dict()) >= {"eta", "sqrt_eta", "term_F", "term_rot", "term_gap"}


def test_quadrature_order_override(manufactured):
    problem, state = manufactured
    default = estimate(problem, state)
    finer = estimate(problem, state, quad_order=6)
    assert problem.quad_order == 4
    assert finer.eta == pytest.approx(default.eta, rel=1e-2)


def test_reliability_and_efficiency(manufactured, manufactured_error):
    problem, state = manufactured
    report = estimate(problem, state)
    error_sq = manufactured_error(problem, state) ** 2
    assert error_sq <= reliability_bound(problem, report)
    assert efficiency_terms(report) <= efficiency_constant(problem) * error_sq


@pytest.mark.slow
def test_bounds_hold_under_refinement(manufactured_error):
    for N in (16, 32):
        problem, state = solved(manufactured_family(), N)
        report = estimate(problem, state)
        error_sq = manufactured_error(problem, state) ** 2
        assert error_sq <= reliability_bound(problem, report)
        assert efficiency_terms(report) <= efficiency_constant(problem) * error_sq
