import logging

import numpy as np

from core.errors import MeshError

logger = logging.getLogger(__name__)

PERIODIC = "periodic"
DIRICHLET = "dirichlet"
FLAVORS = (PERIODIC, DIRICHLET)


class Mesh:
    """Criss-cross triangulation of the unit square.

    Every grid square is split by its positive-slope diagonal. Vertex
    (i, j) sits at (i/N, j/N) and has index i + j*(N+1). The geometry cache
    (area, barycenter, gradients of the barycentric coordinates) is filled at
    construction; the mesh is read-only afterwards.
    """

    def __init__(self, N, flavor=PERIODIC):
        if int(N) != N or N < 1:
            raise MeshError(f"N must be a positive integer, got {N!r}")
        if flavor not in FLAVORS:
            raise MeshError(f"unknown mesh flavor {flavor!r}")
        self.N = int(N)
        self.flavor = flavor
        self.h = np.sqrt(2.0) / self.N

        n1 = self.N + 1
        i, j = np.meshgrid(np.arange(n1), np.arange(n1), indexing="xy")
        self.lattice = np.column_stack([i.ravel(), j.ravel()])
        self.vertices = self.lattice / self.N

        si, sj = np.meshgrid(np.arange(self.N), np.arange(self.N), indexing="xy")
        si, sj = si.ravel(), sj.ravel()
        v00 = si + sj * n1
        v10 = v00 + 1
        v01 = v00 + n1
        v11 = v01 + 1
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        self.elements = np.empty((2 * self.N * self.N, 3), dtype=np.int64)
        self.elements[0::2] = lower
        self.elements[1::2] = upper

        on_edge = (self.lattice == 0) | (self.lattice == self.N)
        self.boundary_vertex_ids = np.flatnonzero(on_edge.any(axis=1))
        if flavor == PERIODIC:
            self.boundary_vertex_ids = np.empty(0, dtype=np.int64)

        self._build_cache()
        for arr in (self.vertices, self.lattice, self.elements, self.boundary_vertex_ids,
                    self.areas, self.barycenters, self.bary_grads):
            arr.setflags(write=False)
        logger.debug("built %s mesh N=%d: %d vertices, %d elements",
                     flavor, self.N, self.n_vertices, self.n_elements)

    def _build_cache(self):
        p = self.vertices[self.elements]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.areas = 0.5 * det
        self.barycenters = p.mean(axis=1)
        # rows of the inverse Jacobian give grad(l1), grad(l2); grad(l0) = -(sum)
        g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
        self.bary_grads = np.stack([-(g1 + g2), g1, g2], axis=1)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def barycenter(self, e):
        if not 0 <= e < self.n_elements:
            raise MeshError(f"element index {e} out of range [0, {self.n_elements})")
        return self.barycenters[e].copy()

    def map_points(self, bary):
        """Physical coordinates (E, nq, 2) of barycentric points (nq, 3) on every element."""
        p = self.vertices[self.elements]
        return np.einsum("qi,eid->eqd", bary, p)

    def edges(self):
        """Unique undirected edges (sorted vertex pairs) and, per edge, the incident element count."""
        loc = np.array([[0, 1], [1, 2], [2, 0]])
        all_edges = np.sort(self.elements[:, loc].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
        return uniq, counts

    def vertex_element_incidence(self):
        """Per vertex, the number of elements containing it."""
        return np.bincount(self.elements.ravel(), minlength=self.n_vertices)


def build_uniform_mesh(N, flavor=PERIODIC):
    return Mesh(N, flavor)


def barycenter(mesh, e):
    return mesh.barycenter(e)
