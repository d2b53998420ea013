"""Two-scale least-squares solver for u + H(D^2 u) = 0 on the unit square, u = 0 on the boundary.

The unknown v lives in the P1 space with eliminated boundary nodes. Its
discrete Hessian is the element-wise derivative of the recovered gradient
(symmetrised), H is evaluated per element and averaged to the vertices, and
the L2 norm of v + H~ is minimised by damped Gauss-Newton, with L-BFGS-B and
Powell as fallbacks.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize

from core.control import DIM, sample_grid, select_lambda
from core.errors import ConfigError, FamilyError, SpaceError
from core.fem import NONE, FeFunction, build_space, point_values
from core.mesh import DIRICHLET, build_uniform_mesh
from solver.homogenization import (FD_STEP, CellHamiltonian, ExactHamiltonian, Hamiltonian,
                                   active_derivatives, harmonic_means)
from solver.mixed_solver import DEFAULT_TOL

logger = logging.getLogger(__name__)

CELL = "cell"
EXACT = "exact"
MODES = (CELL, EXACT)
OBJECTIVE_QUAD_ORDER = 4
EXTRAPOLATE = "extrapolate"
PROJECT = "project"
RECOVERIES = (EXTRAPOLATE, PROJECT)
GN_MAX_ITER = 50
GN_DAMPING = 1e-10
GN_RTOL = 1e-12
GN_ATOL = 1e-28
ARMIJO = 1e-4
MAX_HALVINGS = 10


@dataclass
class TwoScaleConfig:
    omega_N: int = 8
    cell_N: int = 4
    sigma: float = 0.1
    mode: str = EXACT
    gtol: float = 1e-9
    ftol: float = 1e-13
    max_evals: int = 5000
    cell_tol: float = DEFAULT_TOL
    fd_step: float = FD_STEP
    workers: int = 1
    boundary: str = EXTRAPOLATE

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"hamiltonian mode must be one of {MODES}, got {self.mode!r}")
        if self.boundary not in RECOVERIES:
            raise ConfigError(f"boundary recovery must be one of {RECOVERIES}, got {self.boundary!r}")
        for name in ("omega_N", "cell_N", "max_evals", "workers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("sigma", "gtol", "ftol", "cell_tol", "fd_step"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")


@dataclass
class EffectiveSolution:
    u: FeFunction
    objective: float
    evaluations: int
    htilde: FeFunction
    converged: bool = False
    message: str = ""
    trace: List[float] = field(default_factory=list)
    mode: str = EXACT

    def full(self):
        """The solution on the P1 space including the (zero) boundary nodes."""
        space = build_space(self.u.space.mesh, 1, 1, NONE)
        return FeFunction(space, extension_matrix(self.u.space) @ self.u.coeffs)

    def diagnostics(self):
        return {"objective": self.objective, "evaluations": self.evaluations,
                "converged": self.converged, "message": self.message, "mode": self.mode}


def extension_matrix(space0):
    """(n_vertices, n_interior) zero extension of boundary-free P1 coefficients."""
    mesh = space0.mesh
    idx0 = space0.node_index(mesh.lattice[:, 0], mesh.lattice[:, 1])
    keep = idx0 >= 0
    return sp.coo_matrix((np.ones(np.count_nonzero(keep)), (np.flatnonzero(keep), idx0[keep])),
                         shape=(mesh.n_vertices, space0.n_dofs)).tocsr()


def extrapolation_rows(mesh, scale):
    """Rows scale_b (w_b - 2 w_b' + w_b'') at boundary vertices b.

    b' and b'' are the next two vertices along the inward normal, along the
    inward diagonal at corners.
    """
    N = mesh.N
    index = np.full((N + 1, N + 1), -1)
    index[mesh.lattice[:, 0], mesh.lattice[:, 1]] = np.arange(mesh.n_vertices)
    b = mesh.boundary_vertex_ids
    ij = mesh.lattice[b]
    step = (ij == 0).astype(int) - (ij == N).astype(int)
    one, two = ij + step, ij + 2 * step
    cols = np.column_stack([b, index[one[:, 0], one[:, 1]], index[two[:, 0], two[:, 1]]])
    vals = np.outer(scale[b], [1.0, -2.0, 1.0])
    rows = np.repeat(b, 3)
    return sp.coo_matrix((vals.ravel(), (rows, cols.ravel())),
                         shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()


class HessianOperator:
    """Linear maps from boundary-free P1 coefficients to element Hessians and recovered gradients.

    The gradient is recovered by L2 projection. With `boundary="extrapolate"`
    the projection rows of boundary vertices are replaced by linear
    extrapolation from the interior, so quadratics get their exact Hessian on
    every element; `boundary="project"` keeps the plain projection. Meshes
    with N < 3 have no two interior vertices to extrapolate from and always
    use the plain projection.
    """

    def __init__(self, mesh, quad_order=OBJECTIVE_QUAD_ORDER, boundary=EXTRAPOLATE):
        if mesh.flavor != DIRICHLET:
            raise SpaceError("discrete Hessians are built on dirichlet meshes")
        if boundary not in RECOVERIES:
            raise ConfigError(f"boundary recovery must be one of {RECOVERIES}, got {boundary!r}")
        self.mesh = mesh
        self.quad_order = quad_order
        self.boundary = boundary if mesh.N >= 3 else PROJECT
        self.space0 = build_space(mesh, 1, 1, NONE, eliminate_boundary=True)
        self.space = build_space(mesh, 1, 1, NONE)

        E = mesh.n_elements
        rows = np.repeat(np.arange(E), 3)
        cols = mesh.elements.ravel()
        self.diff = [sp.coo_matrix((mesh.bary_grads[:, :, j].ravel(), (rows, cols)),
                                   shape=(E, mesh.n_vertices)).tocsr() for j in range(DIM)]
        self.barycentric = sp.coo_matrix((np.full(3 * E, 1.0 / 3.0), (rows, cols)),
                                         shape=(E, mesh.n_vertices)).tocsr()
        _, w, phi, dphi = self.space.quadrature(quad_order)
        grad_load = [self.space.assemble(np.einsum("eq,qa,eqb->eab", w, phi, dphi[..., k])).tocsr()
                     for k in range(DIM)]
        mass = self.space.mass_matrix(quad_order).tocsr()
        if self.boundary == EXTRAPOLATE:
            inner = np.ones(mesh.n_vertices)
            inner[mesh.boundary_vertex_ids] = 0.0
            keep = sp.diags(inner)
            self.recovery = (keep @ mass + extrapolation_rows(mesh, mass.diagonal())).tocsr()
            self.loads = [(keep @ G).tocsr() for G in grad_load]
        else:
            self.recovery = mass
            self.loads = grad_load
        self._lu = spla.splu(self.recovery.tocsc())

        self.extension = extension_matrix(self.space0)

    def recovered_gradient(self, v_full):
        return [self._lu.solve(G @ v_full) for G in self.loads]

    def apply_full(self, v_full):
        """(E, 2, 2) symmetrised Hessians and (E, 2) barycentre gradients of a full P1 vector."""
        w = self.recovered_gradient(v_full)
        D1, D2 = self.diff
        off = 0.5 * (D2 @ w[0] + D1 @ w[1])
        hess = np.empty((self.mesh.n_elements, DIM, DIM))
        hess[:, 0, 0] = D1 @ w[0]
        hess[:, 1, 1] = D2 @ w[1]
        hess[:, 0, 1] = off
        hess[:, 1, 0] = off
        grad = np.column_stack([self.barycentric @ w[0], self.barycentric @ w[1]])
        return hess, grad

    def apply(self, v):
        return self.apply_full(self.extension @ v)

    def adjoint(self, cot):
        """Transpose of `apply` for cotangents (E, 5) ordered R11, R12, R22, p1, p2."""
        D1, D2 = self.diff
        g1 = D1.T @ cot[:, 0] + 0.5 * (D2.T @ cot[:, 1]) + self.barycentric.T @ cot[:, 3]
        g2 = D2.T @ cot[:, 2] + 0.5 * (D1.T @ cot[:, 1]) + self.barycentric.T @ cot[:, 4]
        back = (self.loads[0].T @ self._lu.solve(g1, trans="T")
                + self.loads[1].T @ self._lu.solve(g2, trans="T"))
        return self.extension.T @ back

    def linearised(self, dH):
        """Sparse (E, n_vertices) maps P1, P2 with dH . (R11, R12, R22, p1, p2)(w) = P1 w1 + P2 w2."""
        D1, D2 = self.diff
        s = [sp.diags(dH[:, k]) for k in range(dH.shape[1])]
        first = s[0] @ D1 + 0.5 * s[1] @ D2 + s[3] @ self.barycentric
        second = 0.5 * s[1] @ D1 + s[2] @ D2 + s[4] @ self.barycentric
        return first.tocsr(), second.tocsr()


def discrete_hessian(u, operator=None):
    """Symmetrised element-wise Jacobian of the recovered gradient of u, (E, 2, 2)."""
    space = u.space
    if space.degree != 1 or space.components != 1:
        raise SpaceError("discrete Hessians are defined for scalar P1 functions")
    op = operator or HessianOperator(space.mesh)
    v_full = op.extension @ u.coeffs if space.eliminate_boundary else u.coeffs
    return op.apply_full(v_full)[0]


def nodal_averaging_matrix(mesh):
    """(n_vertices, n_elements) matrix averaging element values over the elements at each vertex."""
    E = mesh.n_elements
    count = mesh.vertex_element_incidence()
    rows = mesh.elements.ravel()
    cols = np.repeat(np.arange(E), 3)
    return sp.coo_matrix((1.0 / count[rows], (rows, cols)), shape=(mesh.n_vertices, E)).tocsr()


def averaged_hamiltonian(hessians, hamiltonian, mesh, gradients=None):
    hessians = np.asarray(hessians, float)
    if hessians.shape != (mesh.n_elements, DIM, DIM):
        raise SpaceError(f"expected one 2x2 matrix per element, got shape {hessians.shape}")
    gradients = np.zeros((mesh.n_elements, DIM)) if gradients is None else gradients
    values = hamiltonian(mesh.barycenters, gradients, hessians)
    return FeFunction(build_space(mesh, 1, 1, NONE), nodal_averaging_matrix(mesh) @ values)


class EpsHamiltonian(Hamiltonian):
    """sup_a(-A(x, x/eps):R - b(x, x/eps).p - f(x, x/eps)) at given points x."""
    mode = "eps"

    def __init__(self, family, eps):
        if not eps > 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        grid = sample_grid(16, family=family)
        for alpha in family.controls:
            if not np.allclose(family.evaluate(grid.x, grid.y, alpha)[2], 1.0):
                raise FamilyError(f"family {family.name!r} needs c = 1 for the least-squares eps problem")
        self.family = family
        self.eps = eps
        self._points = None
        self._coefficients = None

    def coefficients(self, x):
        if self._points is None or not np.array_equal(self._points, x):
            y = x / self.eps
            stacks = [self.family.evaluate(x, y, alpha) for alpha in self.family.controls]
            A, b, _, f = (np.stack(arrs) for arrs in zip(*stacks))
            self._points = np.array(x, copy=True)
            self._coefficients = (A, b, f)
        return self._coefficients

    def active(self, x, p, R):
        A, b, f = self.coefficients(x)
        vals = -np.sum(A * R[None], axis=(-2, -1)) - np.sum(b * p[None], axis=-1) - f
        idx = np.argmax(vals, axis=0)
        return vals[idx, np.arange(idx.size)], idx, A, b

    def __call__(self, s, p, R):
        return self.active(s, p, R)[0]

    def derivatives(self, s, p, R, base=None, step=FD_STEP):
        _, idx, A, b = self.active(s, p, R)
        return active_derivatives(A, b, idx)


class BudgetExhausted(Exception):
    pass


class LeastSquaresObjective:
    """J(v) = ||v + H~(D_h^2 v)||^2 with its chain-rule gradient, best-so-far and evaluation count."""

    def __init__(self, operator, hamiltonian, max_evals, fd_step=FD_STEP):
        self.op = operator
        self.hamiltonian = hamiltonian
        self.max_evals = max_evals
        self.fd_step = fd_step
        self.mass = operator.space.mass_matrix(OBJECTIVE_QUAD_ORDER)
        self.average = nodal_averaging_matrix(operator.mesh)
        self.points = operator.mesh.barycenters
        self.evaluations = 0
        self.best_value = np.inf
        self.best_x = None
        self.trace = []

    def residual(self, v):
        hess, grad = self.op.apply(v)
        values = self.hamiltonian(self.points, grad, hess)
        return self.op.extension @ v + self.average @ values, hess, grad, values

    def state(self, v):
        """Counted evaluation: (J, residual, hessians, gradients, element values) at v."""
        if self.evaluations >= self.max_evals:
            raise BudgetExhausted
        self.evaluations += 1
        v = np.array(v, dtype=float)
        r, hess, grad, values = self.residual(v)
        J = float(r @ (self.mass @ r))
        self.trace.append(J)
        if J < self.best_value:
            self.best_value, self.best_x = J, v
        return J, r, hess, grad, values

    def _evaluate(self, v, with_gradient):
        J, r, hess, grad, values = self.state(v)
        if not with_gradient:
            return J
        Mr = self.mass @ r
        dH = self.hamiltonian.derivatives(self.points, grad, hess, base=values, step=self.fd_step)
        y = self.average.T @ Mr
        gradient = 2.0 * (self.op.extension.T @ Mr + self.op.adjoint(dH * y[:, None]))
        return J, gradient

    def __call__(self, v):
        return self._evaluate(v, True)

    def value(self, v):
        return self._evaluate(v, False)


def linear_oracle(mesh, diffusion, c=1.0, f=1.0, space=None):
    """P1 Galerkin solution of c u - div(diffusion grad u) = f, u = 0 on the boundary."""
    space = space or build_space(mesh, 1, 1, NONE, eliminate_boundary=True)
    _, w, phi, dphi = space.quadrature(OBJECTIVE_QUAD_ORDER)
    D = np.asarray(diffusion, float)
    K = space.assemble(np.einsum("eq,eqad,dk,eqbk->eab", w, dphi, D, dphi))
    K = K + c * space.mass_matrix(OBJECTIVE_QUAD_ORDER)
    load = f * space.assemble_vector(np.einsum("eq,qa->ea", w, phi))
    return FeFunction(space, spla.spsolve(K.tocsc(), load))


def initial_guess(operator, family):
    """Linearised problem with the harmonic mean of a0 times B for separable families, else zero."""
    if family.oracle is None:
        return np.zeros(operator.space0.n_dofs)
    m0, _ = harmonic_means(family)
    u = linear_oracle(operator.mesh, m0 * family.oracle.B, 1.0, family.oracle.f0, operator.space0)
    return u.coeffs


def gauss_newton(objective, x0):
    """Damped Gauss-Newton on J with Armijo halving; returns (converged, message).

    The recovered gradients w enter as extra unknowns tied to v by the
    recovery rows A w_k = G_k v, so each step is one sparse KKT solve.
    Derivatives of H are taken at accepted points only; every trial point
    is a counted evaluation.
    """
    op = objective.op
    mass = objective.mass
    n0, nv = op.space0.n_dofs, op.mesh.n_vertices
    v = np.asarray(x0, float)
    J, r, hess, grad, values = objective.state(v)
    if n0 == 0:
        return True, "no interior unknowns"

    loads = [G @ op.extension for G in op.loads]
    constraint = sp.bmat([[-loads[0], op.recovery, None], [-loads[1], None, op.recovery]]).tocsr()
    damping = sp.block_diag([GN_DAMPING * op.space0.mass_matrix(OBJECTIVE_QUAD_ORDER),
                             sp.csr_matrix((2 * nv, 2 * nv))])
    zeros = np.zeros(2 * nv)
    for it in range(GN_MAX_ITER):
        if J <= GN_ATOL:
            return True, f"functional below {GN_ATOL:g} after {it} Gauss-Newton steps"
        dH = objective.hamiltonian.derivatives(objective.points, grad, hess, base=values,
                                               step=objective.fd_step)
        first, second = op.linearised(dH)
        jac = sp.hstack([op.extension, objective.average @ first, objective.average @ second]).tocsr()
        Mr = mass @ r
        kkt = sp.bmat([[jac.T @ mass @ jac + damping, constraint.T], [constraint, None]]).tocsc()
        try:
            step = spla.splu(kkt).solve(np.concatenate([-(jac.T @ Mr), zeros]))
        except RuntimeError as exc:
            return False, f"Gauss-Newton system could not be factorised: {exc}"
        d = step[:n0 + 2 * nv]
        Jd = jac @ d
        slope = 2.0 * float(Mr @ Jd)
        predicted = -slope - float(Jd @ (mass @ Jd))
        logger.debug("Gauss-Newton step %d: J=%.6e predicted decrease %.3e", it, J, predicted)
        if predicted <= GN_RTOL * J:
            return True, f"predicted decrease below {GN_RTOL:g} J after {it} Gauss-Newton steps"
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = objective.state(v + t * d[:n0])
            if trial[0] <= J + ARMIJO * t * slope:
                break
            t *= 0.5
        else:
            return False, f"Gauss-Newton line search failed after {MAX_HALVINGS} halvings"
        v = v + t * d[:n0]
        J, r, hess, grad, values = trial
    return False, f"Gauss-Newton stopped after {GN_MAX_ITER} steps"


def minimise_least_squares(operator, hamiltonian, config, x0):
    objective = LeastSquaresObjective(operator, hamiltonian, config.max_evals, config.fd_step)
    converged, message = False, ""
    start = time.perf_counter()
    try:
        converged, message = gauss_newton(objective, x0)
        if not converged:
            logger.warning("Gauss-Newton stopped without convergence (%s); continuing with L-BFGS-B", message)
            res = minimize(objective, objective.best_x, jac=True, method="L-BFGS-B",
                           options={"maxfun": config.max_evals, "maxiter": config.max_evals,
                                    "ftol": config.ftol, "gtol": config.gtol})
            converged, message = bool(res.success), str(res.message)
        if not converged:
            logger.warning("L-BFGS-B stopped without convergence (%s); continuing with Powell", message)
            res = minimize(objective.value, objective.best_x, method="Powell",
                           options={"maxfev": max(config.max_evals - objective.evaluations, 1),
                                    "ftol": config.ftol, "xtol": 1e-10})
            converged, message = bool(res.success), str(res.message)
    except BudgetExhausted:
        message = f"evaluation budget of {config.max_evals} exhausted"
        logger.warning("least-squares minimisation: %s", message)

    v = objective.best_x if objective.best_x is not None else np.asarray(x0, float)
    _, _, _, values = objective.residual(v)
    htilde = FeFunction(operator.space, objective.average @ values)
    logger.info("least-squares %s solve on N=%d: J=%.6e after %d evaluations (%.1fs)",
                hamiltonian.mode, operator.mesh.N, objective.best_value, objective.evaluations,
                time.perf_counter() - start)
    return EffectiveSolution(FeFunction(operator.space0, v), float(objective.best_value),
                             objective.evaluations, htilde, converged, message,
                             list(objective.trace), hamiltonian.mode)


def solve_effective(config, family, certificate=None, cache=None, initial=None):
    mesh = build_uniform_mesh(config.omega_N, DIRICHLET)
    operator = HessianOperator(mesh, boundary=config.boundary)
    if config.mode == EXACT:
        hamiltonian = ExactHamiltonian(family)
    else:
        certificate = certificate or select_lambda(family)
        hamiltonian = CellHamiltonian(family, certificate, config.sigma, config.cell_N,
                                      config.cell_tol, workers=config.workers, cache=cache)
    x0 = initial_guess(operator, family) if initial is None else np.asarray(initial, float)
    return minimise_least_squares(operator, hamiltonian, config, x0)


def prolongate(solution, operator):
    """Boundary-free coefficients on `operator`'s mesh interpolating a coarser solution."""
    values = point_values(solution.full(), operator.mesh.vertices)
    return operator.extension.T @ values


def solve_eps_problem(eps, N, family, config=None, initial=None):
    """Least-squares solution of the oscillatory problem with period eps on an N x N mesh.

    `initial` may be an EffectiveSolution on a coarser mesh; it is interpolated
    and used as the starting point.
    """
    config = config or TwoScaleConfig(omega_N=N)
    mesh = build_uniform_mesh(N, DIRICHLET)
    operator = HessianOperator(mesh, boundary=config.boundary)
    hamiltonian = EpsHamiltonian(family, eps)
    x0 = initial_guess(operator, family) if initial is None else prolongate(initial, operator)
    return minimise_least_squares(operator, hamiltonian, config, x0)
