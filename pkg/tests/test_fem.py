import numpy as np
import pandas as pd
import pytest

from core.errors import SpaceError
from core.fem import (NONE, ZERO_MEAN, FeFunction, build_space, eval_at_qp, integrate, interpolate,
                      l2_project, point_values, triple_norm, zero_function, export_vertex_csv)
from core.mesh import DIRICHLET, PERIODIC, build_uniform_mesh


def random_function(space, rng, zero_mean=False):
    fn = FeFunction(space, rng.standard_normal(space.size))
    if zero_mean:
        iw = space.integral_weights()
        for k in range(space.components):
            c = fn.coeffs[space.component_slice(k)]
            c -= (iw @ c) / iw.sum()
    return fn


@pytest.mark.parametrize("flavor, degree, eliminate, expected", [
    (PERIODIC, 1, False, 16),
    (PERIODIC, 2, False, 64),
    (DIRICHLET, 1, False, 25),
    (DIRICHLET, 1, True, 9),
    (DIRICHLET, 2, True, 49),
])
def test_dof_counts(flavor, degree, eliminate, expected):
    space = build_space(build_uniform_mesh(4, flavor), degree, 1, NONE, eliminate)
    assert space.n_dofs == expected


@pytest.mark.parametrize("degree", [1, 2])
def test_integral_weights_sum_to_area(degree):
    space = build_space(build_uniform_mesh(5, PERIODIC), degree)
    assert space.integral_weights().sum() == pytest.approx(1.0, abs=1e-13)


def test_invalid_spaces():
    with pytest.raises(SpaceError):
        build_space(build_uniform_mesh(2), degree=3)
    with pytest.raises(SpaceError):
        build_space(build_uniform_mesh(2, PERIODIC), eliminate_boundary=True)
    with pytest.raises(SpaceError):
        build_space(build_uniform_mesh(2, DIRICHLET), constraint=ZERO_MEAN)
    with pytest.raises(SpaceError):
        FeFunction(build_space(build_uniform_mesh(2)), np.zeros(3))


@pytest.mark.parametrize("N", [4, 8, 16])
def test_periodic_vector_fields_satisfy_maxwell_identity(N, rng):
    space = build_space(build_uniform_mesh(N, PERIODIC), 1, 2)
    for _ in range(34):
        rec = eval_at_qp(random_function(space, rng), 1)
        full = integrate(rec.weights, np.sum(rec.gradient ** 2, axis=(-2, -1)))
        split = integrate(rec.weights, rec.divergence ** 2) + integrate(rec.weights, rec.rot2d ** 2)
        assert split == pytest.approx(full, rel=1e-10)


def test_poincare_inequalities(rng):
    mesh = build_uniform_mesh(8, PERIODIC)
    scalar = build_space(mesh, 1, 1, ZERO_MEAN)
    vector = build_space(mesh, 1, 2, ZERO_MEAN)
    for _ in range(20):
        rec = eval_at_qp(random_function(scalar, rng, zero_mean=True), 2)
        uu = integrate(rec.weights, rec.value ** 2)
        gg = integrate(rec.weights, np.sum(rec.gradient ** 2, axis=-1))
        assert uu <= gg / (4 * np.pi ** 2) * (1 + 1e-12)
        rec = eval_at_qp(random_function(vector, rng, zero_mean=True), 2)
        ww = integrate(rec.weights, np.sum(rec.value ** 2, axis=-1))
        dd = integrate(rec.weights, np.sum(rec.gradient ** 2, axis=(-2, -1)))
        assert ww <= 2 / np.pi ** 2 * dd * (1 + 1e-12)


def test_p2_interpolation_reproduces_quadratics():
    space = build_space(build_uniform_mesh(3, DIRICHLET), 2)
    g = lambda x: x[:, 0] ** 2 + x[:, 0] * x[:, 1] - 0.5 * x[:, 1]
    rec = eval_at_qp(interpolate(space, g), 4)
    assert np.allclose(rec.value, g(rec.points.reshape(-1, 2)).reshape(rec.value.shape))
    grad = np.stack([2 * rec.points[..., 0] + rec.points[..., 1], rec.points[..., 0] - 0.5], axis=-1)
    assert np.allclose(rec.gradient, grad)


def test_zero_mean_interpolation():
    space = build_space(build_uniform_mesh(6, PERIODIC), 1, 2, ZERO_MEAN)
    fn = interpolate(space, lambda x: np.column_stack([np.sin(2 * np.pi * x[:, 0]) + 3.0, x[:, 1]]))
    assert np.allclose(fn.integral(), 0.0, atol=1e-13)


def test_triple_norm_of_constant():
    mesh = build_uniform_mesh(4, PERIODIC)
    w = zero_function(build_space(mesh, 1, 2, ZERO_MEAN))
    u = interpolate(build_space(mesh), lambda x: np.ones(len(x)))
    assert triple_norm(w, u, 2.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        triple_norm(w, u, 0.0)


def test_gradient_projection_of_linear_function_is_exact():
    mesh = build_uniform_mesh(5, DIRICHLET)
    u = interpolate(build_space(mesh), lambda x: 2 * x[:, 0] - 3 * x[:, 1] + 1)
    w = l2_project(build_space(mesh, 1, 2), u)
    assert np.allclose(w.component(0), 2.0)
    assert np.allclose(w.component(1), -3.0)


def test_point_values_of_p1_function(rng):
    space = build_space(build_uniform_mesh(4, DIRICHLET))
    fn = random_function(space, rng)
    mesh = space.mesh
    assert np.allclose(point_values(fn, mesh.vertices), fn.vertex_values()[:, 0])
    lin = interpolate(space, lambda x: 1 + x[:, 0] - 2 * x[:, 1])
    pts = rng.uniform(0, 1, size=(50, 2))
    assert np.allclose(point_values(lin, pts), 1 + pts[:, 0] - 2 * pts[:, 1])


def test_export_vertex_csv(tmp_path):
    space = build_space(build_uniform_mesh(2, PERIODIC), 1, 2)
    fn = interpolate(space, lambda x: x)
    export_vertex_csv(fn, tmp_path / "w.csv")
    frame = pd.read_csv(tmp_path / "w.csv")
    assert list(frame.columns) == ["vertex", "x", "y", "value_1", "value_2"]
    assert len(frame) == 9
