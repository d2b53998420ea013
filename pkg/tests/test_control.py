import numpy as np
import pytest

from core.control import (DELTA_CAP, ControlGrid, CoefficientFamily, CoefficientTable, CordesCertificate,
                          bellman_max, constant_two_control, cordes_slack, fo_benchmark, gamma_at, gamma_from,
                          get_family, l_lambda, laplace_family, sample_grid, select_lambda)
from core.errors import CordesError, FamilyError


def test_benchmark_certificate():
    family = fo_benchmark()
    grid = sample_grid(128, family=family)
    cert = select_lambda(family, grid)
    assert cert.delta >= 0.05
    assert cert.margin >= 0.0
    assert cordes_slack(family, cert.lam, cert.delta, grid) >= 0.0
    assert cert.zeta1 > 0


def test_identity_diffusion_is_capped_at_lambda_one():
    cert = select_lambda(laplace_family())
    assert cert.lam == pytest.approx(1.0)
    assert cert.delta == pytest.approx(DELTA_CAP)


def test_drift_family_delta_bounded():
    cert = select_lambda(constant_two_control())
    assert 0.0 < cert.delta < 0.8


def test_rejects_non_elliptic_and_nonpositive_c():
    A = lambda x, y, a: np.broadcast_to(np.diag([1.0, -1.0]), np.shape(y)[:-1] + (2, 2))
    zeros2 = lambda x, y, a: np.zeros(np.shape(y)[:-1] + (2,))
    ones = lambda x, y, a: np.ones(np.shape(y)[:-1])
    with pytest.raises(CordesError):
        select_lambda(CoefficientFamily("saddle", A, zeros2, ones, ones, [0.0]))
    I = lambda x, y, a: np.broadcast_to(np.eye(2), np.shape(y)[:-1] + (2, 2))
    zeros = lambda x, y, a: np.zeros(np.shape(y)[:-1])
    with pytest.raises(CordesError):
        select_lambda(CoefficientFamily("no-c", I, zeros2, zeros, ones, [0.0]))


def test_gamma_of_identity():
    assert gamma_from(np.eye(2), np.zeros(2), 1.0, 1.0) == pytest.approx(1.0)


def test_bellman_max_value_and_ties():
    cert = CordesCertificate(1.0, 0.5, 0.0, "test")
    value, alpha = bellman_max(laplace_family(), cert, [0.0, 0.0], [0.3, 0.4], np.eye(2), [0.0, 0.0], 0.0)
    assert value == pytest.approx(-2.0)
    assert alpha == 0.0
    twin = laplace_family().with_controls([0.0, 1.0])
    _, alpha = bellman_max(twin, cert, [0.0, 0.0], [0.3, 0.4], np.eye(2), [0.0, 0.0], 0.0)
    assert alpha == 0.0


def test_renormalised_operator_is_close_to_l_lambda(rng):
    family = fo_benchmark()
    grid = sample_grid(16, family=family)
    cert = select_lambda(family, grid)
    table = CoefficientTable(family, cert, grid.x, grid.y)
    P = grid.y.shape[0]
    for _ in range(20):
        M = rng.standard_normal((P, 2, 2))
        M = 0.5 * (M + np.swapaxes(M, -1, -2))
        q = rng.standard_normal((P, 2))
        v = rng.standard_normal(P)
        lin = table.residuals(M, q, v) + table.gamma * table.f
        l_lambda = -np.trace(M, axis1=-2, axis2=-1) + cert.lam * v
        bound = np.sqrt(1 - cert.delta) * np.sqrt(np.sum(M ** 2, axis=(-2, -1)) + 2 * cert.lam * np.sum(q ** 2, axis=-1)
                                                  + cert.lam ** 2 * v ** 2)
        assert np.all(np.abs(lin - l_lambda[None]) <= bound[None] * (1 + 1e-10) + 1e-12)


def test_registry_and_grids():
    with pytest.raises(FamilyError):
        get_family("nope")
    fam = get_family("fo-benchmark", controls=[0.0, 0.5, 1.0])
    assert len(fam.controls) == 3
    with pytest.raises(FamilyError):
        ControlGrid([])
    assert len(ControlGrid.uniform(5)) == 5


def test_certificate_validation_and_scaling():
    with pytest.raises(CordesError):
        CordesCertificate(-1.0, 0.5, 0.0, "x")
    with pytest.raises(CordesError):
        CordesCertificate(1.0, 1.0, 0.0, "x")
    cert = CordesCertificate(0.2, 0.5, 0.0, "x")
    scaled = cert.scaled(0.01)
    assert scaled.lam == pytest.approx(0.002)
    assert scaled.delta == cert.delta


def _constant_family(A, c, controls=(0.0,)):
    diffusion = lambda x, y, a: np.broadcast_to(np.asarray(A, float), np.shape(y)[:-1] + (2, 2))
    zeros2 = lambda x, y, a: np.zeros(np.shape(y)[:-1] + (2,))
    zero_order = lambda x, y, a: np.full(np.shape(y)[:-1], float(c))
    ones = lambda x, y, a: np.ones(np.shape(y)[:-1])
    return CoefficientFamily("constant", diffusion, zeros2, zero_order, ones, list(controls))


def test_cordes_slack_of_identity():
    grid = sample_grid(4)
    assert cordes_slack(laplace_family(), 1.0, 0.5, grid) == pytest.approx(0.6)
    assert cordes_slack(laplace_family(), 1.0, 1.0 - 1e-9, grid) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(CordesError):
        cordes_slack(laplace_family(), 1.0, 1.5, grid)


def test_select_lambda_on_anisotropic_diffusion():
    family = _constant_family(np.diag([1.0, 2.0]), 1.0)
    grid = sample_grid(4)
    assert cordes_slack(family, 1.0, 2.0 / 3.0 - 1e-9, grid) >= 0.0
    assert cordes_slack(family, 1.0, 0.7, grid) < 0.0
    cert = select_lambda(family, grid)
    assert cert.delta >= 2.0 / 3.0
    assert cordes_slack(family, cert.lam, cert.delta, grid) >= 0.0
    assert cert.delta == pytest.approx(0.8, abs=1e-3)


def test_gamma_at_examples():
    cert = CordesCertificate(2.0, 0.5, 0.0, "x")
    value = gamma_at(_constant_family(2.0 * np.eye(2), 2.0), cert, [0.0, 0.0], [0.2, 0.7], 0.0)
    assert value == pytest.approx(5.0 / 9.0)
    assert gamma_at(laplace_family(), CordesCertificate(1.0, 0.5, 0.0, "x"), [0.0, 0.0], [0.1, 0.1],
                    0.0) == pytest.approx(1.0)
    benchmark = fo_benchmark()
    lam = select_lambda(benchmark).lam
    bench = CordesCertificate(lam, 0.5, 0.0, "x")
    expected = (6.0 + 1.0 / lam) / (22.0 + 1.0 / lam ** 2)
    assert gamma_at(benchmark, bench, [0.0, 0.0], [0.0, 0.0], 0.0) == pytest.approx(expected)


def test_l_lambda_examples():
    assert l_lambda(2.0, 1.0, 2.0) == 0.0
    assert l_lambda(0.0, 0.0, 3.0) == 0.0
    assert l_lambda(-1.0, 3.0, 0.5) == pytest.approx(2.5)
    assert np.allclose(l_lambda(np.array([1.0, 2.0]), np.array([1.0, 1.0]), 1.0), [0.0, -1.0])


def test_assembled_bellman_contraction(rng):
    family = fo_benchmark()
    grid = sample_grid(8, family=family)
    cert = select_lambda(family, grid)
    P = grid.y.shape[0]
    for _ in range(20):
        M1, M2 = (0.5 * (M + np.swapaxes(M, -1, -2)) for M in rng.standard_normal((2, P, 2, 2)))
        q1, q2 = rng.standard_normal((2, P, 2))
        v1, v2 = rng.standard_normal((2, P))
        F1, _ = bellman_max(family, cert, grid.x, grid.y, M1, q1, v1)
        F2, _ = bellman_max(family, cert, grid.x, grid.y, M2, q2, v2)
        dM, dq, dv = M1 - M2, q1 - q2, v1 - v2
        linear = -np.trace(dM, axis1=-2, axis2=-1) + cert.lam * dv
        bound = np.sqrt(1 - cert.delta) * np.sqrt(np.sum(dM ** 2, axis=(-2, -1))
                                                  + 2 * cert.lam * np.sum(dq ** 2, axis=-1) + cert.lam ** 2 * dv ** 2)
        assert np.all(np.abs(F1 - F2 - linear) <= bound * (1 + 1e-10) + 1e-12)


@pytest.mark.parametrize("small, large", [([0.0, 1.0], ControlGrid.uniform(33)), ([0.5], [0.0, 0.5, 1.0]),
                                          ([0.25, 0.75], [0.0, 0.25, 0.6, 0.75])])
def test_bellman_max_never_decreases_on_larger_grid(rng, small, large):
    family = fo_benchmark()
    grid = sample_grid(8, family=family)
    cert = select_lambda(family, grid)
    P = grid.y.shape[0]
    M = rng.standard_normal((P, 2, 2))
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    q = rng.standard_normal((P, 2))
    v = rng.standard_normal(P)
    low, _ = bellman_max(family.with_controls(small), cert, grid.x, grid.y, M, q, v)
    high, _ = bellman_max(family.with_controls(large), cert, grid.x, grid.y, M, q, v)
    assert np.all(high >= low - 1e-12)
