"""Lagrange finite elements on the criss-cross mesh.

Degrees of freedom live on the lattice of the q-times refined grid: for
q = 1 these are the mesh vertices, for q = 2 the vertices plus the edge
midpoints (horizontal, vertical and diagonal midpoints of the criss-cross
mesh all fall on the half-step grid). Periodic identification is lattice
coordinates modulo qN, so the four cell corners share one DOF.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from core.errors import SpaceError
from core.mesh import DIRICHLET, PERIODIC
from core.quadrature import triangle_rule

logger = logging.getLogger(__name__)

NONE = "none"
ZERO_MEAN = "zero_mean"
CONSTRAINTS = (NONE, ZERO_MEAN)
SUPPORTED_DEGREES = (1, 2)
DEFAULT_QUAD_ORDER = 4

_MIDPOINT_EDGES = ((0, 1), (1, 2), (2, 0))


class FunctionSpace:
    def __init__(self, mesh, degree=1, components=1, constraint=NONE, eliminate_boundary=False):
        if degree not in SUPPORTED_DEGREES:
            raise SpaceError(f"unsupported polynomial degree {degree}; supported: {SUPPORTED_DEGREES}")
        if components not in (1, 2):
            raise SpaceError(f"components must be 1 or 2, got {components}")
        if constraint not in CONSTRAINTS:
            raise SpaceError(f"unknown constraint {constraint!r}")
        if eliminate_boundary and mesh.flavor != DIRICHLET:
            raise SpaceError("boundary elimination needs a dirichlet mesh")
        if constraint == ZERO_MEAN and mesh.flavor != PERIODIC:
            raise SpaceError("zero-mean spaces are only built on periodic meshes")

        self.mesh = mesh
        self.degree = degree
        self.components = components
        self.constraint = constraint
        self.eliminate_boundary = eliminate_boundary
        self.M = degree * mesh.N

        local = [mesh.lattice[mesh.elements[:, i]] * degree for i in range(3)]
        if degree == 2:
            local += [(mesh.lattice[mesh.elements[:, a]] + mesh.lattice[mesh.elements[:, b]])
                      for a, b in _MIDPOINT_EDGES]
        self.local_lattice = np.stack(local, axis=1)
        self.n_local = self.local_lattice.shape[1]

        node_id, coords, boundary = self._number_nodes()
        self.dof_map = node_id
        self.node_coords = coords
        self.n_dofs = coords.shape[0]
        self.boundary_dofs = boundary
        self._cache = {}
        for arr in (self.dof_map, self.node_coords, self.boundary_dofs):
            arr.setflags(write=False)

    def _number_nodes(self):
        M = self.M
        a = self.local_lattice[..., 0]
        b = self.local_lattice[..., 1]
        if self.mesh.flavor == PERIODIC:
            ids = (a % M) + (b % M) * M
            ia, ib = np.meshgrid(np.arange(M), np.arange(M), indexing="xy")
            coords = np.column_stack([ia.ravel(), ib.ravel()]) / M
            return ids, coords, np.empty(0, dtype=np.int64)

        ia, ib = np.meshgrid(np.arange(M + 1), np.arange(M + 1), indexing="xy")
        ia, ib = ia.ravel(), ib.ravel()
        on_boundary = (ia == 0) | (ia == M) | (ib == 0) | (ib == M)
        if not self.eliminate_boundary:
            ids = a + b * (M + 1)
            coords = np.column_stack([ia, ib]) / M
            return ids, coords, np.flatnonzero(on_boundary)

        renumber = -np.ones((M + 1) * (M + 1), dtype=np.int64)
        renumber[~on_boundary] = np.arange(np.count_nonzero(~on_boundary))
        ids = renumber[a + b * (M + 1)]
        coords = np.column_stack([ia[~on_boundary], ib[~on_boundary]]) / M
        return ids, coords, np.empty(0, dtype=np.int64)

    @property
    def size(self):
        return self.n_dofs * self.components

    def component_slice(self, k):
        return slice(k * self.n_dofs, (k + 1) * self.n_dofs)

    def node_index(self, a, b):
        """Global DOF of lattice node (a, b) of the refined grid, -1 if eliminated."""
        M = self.M
        if self.mesh.flavor == PERIODIC:
            return (np.asarray(a) % M) + (np.asarray(b) % M) * M
        full = np.asarray(a) + np.asarray(b) * (M + 1)
        if not self.eliminate_boundary:
            return full
        inner = (np.asarray(a) > 0) & (np.asarray(a) < M) & (np.asarray(b) > 0) & (np.asarray(b) < M)
        return np.where(inner, (np.asarray(a) - 1) + (np.asarray(b) - 1) * (M - 1), -1)

    def basis_values(self, bary):
        """Reference basis values (nq, n_local) at barycentric points."""
        if self.degree == 1:
            return bary.copy()
        vals = [bary[:, i] * (2 * bary[:, i] - 1) for i in range(3)]
        vals += [4 * bary[:, a] * bary[:, b] for a, b in _MIDPOINT_EDGES]
        return np.column_stack(vals)

    def basis_gradients(self, bary):
        """Physical basis gradients (E, nq, n_local, 2)."""
        g = self.mesh.bary_grads
        nq = bary.shape[0]
        if self.degree == 1:
            return np.broadcast_to(g[:, None, :, :], (g.shape[0], nq, 3, 2))
        out = np.empty((g.shape[0], nq, 6, 2))
        for i in range(3):
            out[:, :, i] = (4 * bary[None, :, i, None] - 1) * g[:, None, i]
        for k, (a, b) in enumerate(_MIDPOINT_EDGES):
            out[:, :, 3 + k] = 4 * (bary[None, :, b, None] * g[:, None, a]
                                    + bary[None, :, a, None] * g[:, None, b])
        return out

    def quadrature(self, quad_order=DEFAULT_QUAD_ORDER):
        """Cached (points (E,nq,2), weights (E,nq), phi (nq,nl), dphi (E,nq,nl,2))."""
        key = ("quad", quad_order)
        if key not in self._cache:
            bary, w = triangle_rule(quad_order)
            pts = self.mesh.map_points(bary)
            weights = self.mesh.areas[:, None] * w[None, :]
            self._cache[key] = (pts, weights, self.basis_values(bary), self.basis_gradients(bary))
        return self._cache[key]

    def gather(self, coeffs):
        """Element-local coefficients (E, n_local) of one scalar component."""
        dm = self.dof_map
        return np.where(dm >= 0, coeffs[np.maximum(dm, 0)], 0.0)

    def assemble(self, local, other=None):
        """Sparse matrix from local blocks (E, nl_rows, nl_cols); rows in self, columns in other."""
        other = other or self
        rows = np.broadcast_to(self.dof_map[:, :, None], local.shape)
        cols = np.broadcast_to(other.dof_map[:, None, :], local.shape)
        keep = (rows >= 0) & (cols >= 0)
        return sp.coo_matrix((local[keep], (rows[keep], cols[keep])),
                             shape=(self.n_dofs, other.n_dofs)).tocsr()

    def assemble_vector(self, local):
        keep = self.dof_map >= 0
        return np.bincount(self.dof_map[keep], weights=local[keep], minlength=self.n_dofs)

    def mass_matrix(self, quad_order=DEFAULT_QUAD_ORDER):
        key = ("mass", quad_order)
        if key not in self._cache:
            _, w, phi, _ = self.quadrature(quad_order)
            local = np.einsum("eq,qa,qb->eab", w, phi, phi)
            self._cache[key] = self.assemble(local)
        return self._cache[key]

    def stiffness_matrix(self, quad_order=DEFAULT_QUAD_ORDER):
        key = ("stiff", quad_order)
        if key not in self._cache:
            _, w, _, dphi = self.quadrature(quad_order)
            local = np.einsum("eq,eqad,eqbd->eab", w, dphi, dphi)
            self._cache[key] = self.assemble(local)
        return self._cache[key]

    def integral_weights(self):
        """Exact integrals of the scalar basis functions."""
        if "iw" not in self._cache:
            _, w, phi, _ = self.quadrature(2 * self.degree)
            self._cache["iw"] = self.assemble_vector(np.einsum("eq,qa->ea", w, phi))
        return self._cache["iw"]


@dataclass
class FeFunction:
    space: FunctionSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.size,):
            raise SpaceError(f"coefficient vector of length {self.coeffs.size} "
                             f"does not match space size {self.space.size}")

    def component(self, k):
        return self.coeffs[self.space.component_slice(k)]

    def integral(self):
        iw = self.space.integral_weights()
        return np.array([iw @ self.component(k) for k in range(self.space.components)])

    def vertex_values(self):
        """Values at the mesh vertices, (n_vertices, components)."""
        lat = self.space.mesh.lattice * self.space.degree
        idx = self.space.node_index(lat[:, 0], lat[:, 1])
        out = np.zeros((lat.shape[0], self.space.components))
        for k in range(self.space.components):
            c = self.component(k)
            out[:, k] = np.where(idx >= 0, c[np.maximum(idx, 0)], 0.0)
        return out


@dataclass
class QuadratureRecord:
    points: np.ndarray
    weights: np.ndarray
    value: np.ndarray
    gradient: np.ndarray
    divergence: Optional[np.ndarray] = None
    rot2d: Optional[np.ndarray] = None


def build_space(mesh, degree=1, components=1, constraint=NONE, eliminate_boundary=False):
    return FunctionSpace(mesh, degree, components, constraint, eliminate_boundary)


def zero_function(space):
    return FeFunction(space, np.zeros(space.size))


def interpolate(space, g):
    """Nodal interpolant of g.

    `g` receives an (n, 2) array of points and returns (n,) values for scalar
    spaces or (n, 2) for vector spaces. On zero-mean spaces the integral mean
    of the interpolant is removed per component.
    """
    vals = np.asarray(g(space.node_coords), dtype=float)
    if space.components == 1:
        vals = np.broadcast_to(vals, (space.n_dofs,)).reshape(space.n_dofs, 1)
    else:
        vals = np.broadcast_to(vals, (space.n_dofs, space.components))
    coeffs = np.array(vals.T, dtype=float).ravel()
    fn = FeFunction(space, coeffs)
    if space.constraint == ZERO_MEAN:
        iw = space.integral_weights()
        for k in range(space.components):
            c = fn.coeffs[space.component_slice(k)]
            c -= (iw @ c) / iw.sum()
    return fn


def eval_at_qp(fn, quad_order=DEFAULT_QUAD_ORDER):
    if quad_order < 1:
        raise SpaceError("quadrature order must be >= 1")
    space = fn.space
    pts, w, phi, dphi = space.quadrature(quad_order)
    values, grads = [], []
    for k in range(space.components):
        loc = space.gather(fn.component(k))
        values.append(loc @ phi.T)
        grads.append(np.einsum("ea,eqad->eqd", loc, dphi))
    if space.components == 1:
        return QuadratureRecord(pts, w, values[0], grads[0])
    value = np.stack(values, axis=-1)
    jac = np.stack(grads, axis=-2)  # jac[..., k, j] = d_j w_k
    div = jac[..., 0, 0] + jac[..., 1, 1]
    rot = jac[..., 0, 1] - jac[..., 1, 0]
    return QuadratureRecord(pts, w, value, jac, div, rot)


def integrate(weights, integrand):
    return float(np.sum(weights * integrand))


def triple_norm(w, u, lam, quad_order=None):
    """|||(w,u)|||_lambda = sqrt(||Dw||^2 + 2 lambda ||grad u||^2 + lambda^2 ||u||^2)."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if w.space.mesh is not u.space.mesh:
        raise SpaceError("w and u live on different meshes")
    order = quad_order or 2 * max(w.space.degree, u.space.degree)
    rw = eval_at_qp(w, order)
    ru = eval_at_qp(u, order)
    dw = integrate(rw.weights, np.sum(rw.gradient ** 2, axis=(-2, -1)))
    du = integrate(ru.weights, np.sum(ru.gradient ** 2, axis=-1))
    uu = integrate(ru.weights, ru.value ** 2)
    return float(np.sqrt(dw + 2 * lam * du + lam ** 2 * uu))


class L2Projector:
    """L2 projection of gradients of scalar functions onto a vector space, mass matrix factorised once."""

    def __init__(self, target_space, quad_order=DEFAULT_QUAD_ORDER):
        if target_space.components != 2:
            raise SpaceError("gradient projection needs a vector target space")
        if target_space.constraint != NONE or target_space.eliminate_boundary:
            raise SpaceError("gradient projection targets the unconstrained space")
        self.space = target_space
        self.quad_order = quad_order
        self._lu = spla.splu(target_space.mass_matrix(quad_order).tocsc())

    def rhs(self, source):
        if source.space.mesh is not self.space.mesh:
            raise SpaceError("source and target live on different meshes")
        rec = eval_at_qp(source, self.quad_order)
        _, w, phi, _ = self.space.quadrature(self.quad_order)
        return [self.space.assemble_vector(np.einsum("eq,eq,qa->ea", w, rec.gradient[..., k], phi))
                for k in range(2)]

    def solve(self, rhs):
        """Apply the inverse mass matrix to one scalar load vector."""
        return self._lu.solve(np.asarray(rhs, float))

    def project(self, source):
        coeffs = np.concatenate([self.solve(b) for b in self.rhs(source)])
        return FeFunction(self.space, coeffs)


def l2_project(target_space, source, quad_order=DEFAULT_QUAD_ORDER):
    return L2Projector(target_space, quad_order).project(source)


def point_values(fn, points):
    """Values of a scalar P1 function at arbitrary points of the closed unit square."""
    space = fn.space
    if space.degree != 1 or space.components != 1:
        raise SpaceError("point evaluation is implemented for scalar P1 functions")
    N = space.mesh.N
    vals = fn.vertex_values()[:, 0]
    pts = np.atleast_2d(np.asarray(points, float)) * N
    i = np.clip(np.floor(pts[:, 0]).astype(np.int64), 0, N - 1)
    j = np.clip(np.floor(pts[:, 1]).astype(np.int64), 0, N - 1)
    xi, eta = pts[:, 0] - i, pts[:, 1] - j
    v00 = vals[i + j * (N + 1)]
    v10 = vals[i + 1 + j * (N + 1)]
    v01 = vals[i + (j + 1) * (N + 1)]
    v11 = vals[i + 1 + (j + 1) * (N + 1)]
    lower = (1 - xi) * v00 + (xi - eta) * v10 + eta * v11
    upper = (1 - eta) * v00 + xi * v11 + (eta - xi) * v01
    return np.where(xi >= eta, lower, upper)


def export_vertex_csv(fn, path):
    mesh = fn.space.mesh
    vals = fn.vertex_values()
    frame = pd.DataFrame({"vertex": np.arange(mesh.n_vertices),
                          "x": mesh.vertices[:, 0], "y": mesh.vertices[:, 1]})
    if fn.space.components == 1:
        frame["value"] = vals[:, 0]
    else:
        for k in range(fn.space.components):
            frame[f"value_{k + 1}"] = vals[:, k]
    frame.to_csv(path, index=False)
    return frame
