"""Mixed finite element method for renormalised periodic HJB problems.

Unknown vector layout: [w1 | w2 | u | m | mu_w1, mu_w2 | mu_m]; the mu
entries are Lagrange multipliers of the zero-mean constraints, the m block
and mu_m are present only for a nontrivial multiplier space M_h.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from core.control import DIM, CoefficientTable, l_lambda
from core.errors import ConvergenceError, SolverError, SpaceError
from core.fem import DEFAULT_QUAD_ORDER, NONE, ZERO_MEAN, FeFunction, build_space

logger = logging.getLogger(__name__)

TRIVIAL = "trivial"
ZERO_MEAN_M = "zero_mean"
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50
MAX_HALVINGS = 10
LINEAR_RTOL = 1e-12
LINEAR_FAIL_RTOL = 1e-8
REFINE_STEPS = 3


def sigma_constants(delta, lam):
    s = np.sqrt(1.0 - delta)
    sigma1 = 1.0 - 0.5 * s
    sigma2_tilde = (1.0 - s) / 2.0 + 1.0 / (4.0 * (1.0 - s))
    return sigma1, lam * sigma2_tilde


def monotonicity_constant(delta):
    return 0.25 * (1.0 - np.sqrt(1.0 - delta))


def lipschitz_constant(delta, lam, n=DIM):
    s = np.sqrt(1.0 - delta)
    sigma1, sigma2 = sigma_constants(delta, lam)
    return 2.0 + np.sqrt(2.0) * s + sigma1 + (sigma2 / lam) * (0.5 + n * lam / np.pi ** 2)


def b_bound_constant(lam, n=DIM):
    return lam ** -0.5 * (0.5 + n * lam / np.pi ** 2) ** 0.5


def inf_sup_constant(lam, n=DIM):
    return lam ** -0.5 * (2.0 + n * lam / np.pi ** 2) ** -0.5


def error_constant(delta, lam, n=DIM):
    """C_e = 2 (C_L / C_M) (1 + C_b / c_b)."""
    return (2.0 * lipschitz_constant(delta, lam, n) / monotonicity_constant(delta)
            * (1.0 + b_bound_constant(lam, n) / inf_sup_constant(lam, n)))


class MixedProblem:
    """Discrete mixed formulation on a periodic mesh; read-only once built."""

    def __init__(self, mesh, family, certificate, degree_w=1, degree_u=1, m_space=TRIVIAL,
                 frozen_x=None, quad_order=DEFAULT_QUAD_ORDER):
        if m_space not in (TRIVIAL, ZERO_MEAN_M):
            raise SpaceError(f"unknown multiplier space {m_space!r}")
        self.mesh = mesh
        self.family = family
        self.certificate = certificate
        self.lam = certificate.lam
        self.delta = certificate.delta
        self.sigma1, self.sigma2 = sigma_constants(self.delta, self.lam)
        self.frozen_x = None if frozen_x is None else np.asarray(frozen_x, float)
        self.quad_order = quad_order
        self._args = (degree_w, degree_u, m_space)

        self.space_w = build_space(mesh, degree_w, 2, ZERO_MEAN)
        self.space_u = build_space(mesh, degree_u, 1, NONE)
        self.space_m = build_space(mesh, degree_u, 1, ZERO_MEAN) if m_space == ZERO_MEAN_M else None

        self.nW = self.space_w.n_dofs
        self.nU = self.space_u.n_dofs
        self.nM = self.space_m.n_dofs if self.space_m else 0
        self.n_fields = 2 * self.nW + self.nU
        self.n_constraints = 2 + (1 if self.space_m else 0)
        self.size = self.n_fields + self.nM + self.n_constraints

        self._build_operator_rows()
        yq = self.points.reshape(-1, DIM)
        xq = yq if self.frozen_x is None else np.broadcast_to(self.frozen_x, yq.shape)
        self.table = CoefficientTable(family, certificate, xq, yq)
        self._stab = self._stabilisation_matrix()
        self._constraints = self._constraint_matrix()
        self._coupling = self._coupling_matrix() if self.space_m else None
        self._gram_lu = None

    def with_quad_order(self, quad_order):
        degree_w, degree_u, m_space = self._args
        return MixedProblem(self.mesh, self.family, self.certificate, degree_w, degree_u, m_space,
                            self.frozen_x, quad_order)

    # -- local operator rows ------------------------------------------------

    def _build_operator_rows(self):
        pts, wq, phi_w, dphi_w = self.space_w.quadrature(self.quad_order)
        _, _, phi_u, dphi_u = self.space_u.quadrature(self.quad_order)
        E, nq = wq.shape
        nlw, nlu = phi_w.shape[1], phi_u.shape[1]
        nl = 2 * nlw + nlu
        self.points = pts
        self.weights = wq
        self.n_qp = nq

        def rows():
            return np.zeros((E, nq, nl))

        self.dphi_w = dphi_w
        self.dphi_u = dphi_u
        self.sl_w1 = slice(0, nlw)
        self.sl_w2 = slice(nlw, 2 * nlw)
        self.sl_u = slice(2 * nlw, nl)

        L = rows()
        L[..., self.sl_w1] = -dphi_w[..., 0]
        L[..., self.sl_w2] = -dphi_w[..., 1]
        L[..., self.sl_u] = self.lam * phi_u[None]
        rot = rows()
        rot[..., self.sl_w1] = dphi_w[..., 1]
        rot[..., self.sl_w2] = -dphi_w[..., 0]
        gap = [rows(), rows()]
        for k, sl in enumerate((self.sl_w1, self.sl_w2)):
            gap[k][..., sl] = -phi_w[None]
            gap[k][..., self.sl_u] = dphi_u[..., k]
        self.L_rows = L
        self.rot_rows = rot
        self.gap_rows = np.stack(gap, axis=-1)
        self.phi_u = phi_u

        dw = self.space_w.dof_map
        self.global_dofs = np.concatenate([dw, dw + self.nW, self.space_u.dof_map + 2 * self.nW], axis=1)

    def _assemble_fields(self, local):
        g = self.global_dofs
        rows = np.broadcast_to(g[:, :, None], local.shape)
        cols = np.broadcast_to(g[:, None, :], local.shape)
        return sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(self.n_fields, self.n_fields)).tocsr()

    def _stabilisation_matrix(self):
        w = self.weights
        local = (self.sigma1 * np.einsum("eq,eqi,eqj->eij", w, self.rot_rows, self.rot_rows)
                 + self.sigma2 * np.einsum("eq,eqik,eqjk->eij", w, self.gap_rows, self.gap_rows))
        return self._assemble_fields(local)

    def _constraint_matrix(self):
        iw = self.space_w.integral_weights()
        rows = [np.concatenate([iw, np.zeros(self.nW + self.nU + self.nM)]),
                np.concatenate([np.zeros(self.nW), iw, np.zeros(self.nU + self.nM)])]
        if self.space_m:
            rows.append(np.concatenate([np.zeros(self.n_fields), self.space_m.integral_weights()]))
        return sp.csr_matrix(np.vstack(rows))

    def _coupling_matrix(self):
        """C[m_i, field_j] = int grad(phi^m_i) . gap_j."""
        _, _, _, dphi_m = self.space_m.quadrature(self.quad_order)
        local = np.einsum("eq,eqad,eqjd->eaj", self.weights, dphi_m, self.gap_rows)
        dm = self.space_m.dof_map
        rows = np.broadcast_to(dm[:, :, None], local.shape)
        cols = np.broadcast_to(self.global_dofs[:, None, :], local.shape)
        return sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(self.nM, self.n_fields)).tocsr()

    # -- pointwise evaluation -----------------------------------------------

    def split(self, z):
        z = np.asarray(z, float)
        w = z[:2 * self.nW]
        u = z[2 * self.nW:self.n_fields]
        m = z[self.n_fields:self.n_fields + self.nM]
        return w, u, m

    def local_fields(self, z):
        """Element-local field coefficients (E, nl)."""
        w, u, _ = self.split(z)
        return np.concatenate([self.space_w.gather(w[:self.nW]), self.space_w.gather(w[self.nW:]),
                               self.space_u.gather(u)], axis=1)

    def qp_data(self, z):
        """Dw (P,2,2), grad u (P,2), u (P,), L_lambda (P,), rot (P,), gap (P,2) at all quadrature points."""
        loc = self.local_fields(z)
        lw1, lw2, lu = loc[:, self.sl_w1], loc[:, self.sl_w2], loc[:, self.sl_u]
        jac = np.stack([np.einsum("ea,eqad->eqd", lw1, self.dphi_w),
                        np.einsum("ea,eqad->eqd", lw2, self.dphi_w)], axis=-2)
        gu = np.einsum("ea,eqad->eqd", lu, self.dphi_u)
        uv = lu @ self.phi_u.T
        Lv = l_lambda(np.trace(jac, axis1=-2, axis2=-1), uv, self.lam)
        rot = np.einsum("eqi,ei->eq", self.rot_rows, loc)
        gap = np.einsum("eqik,ei->eqk", self.gap_rows, loc)
        P = -1
        return (jac.reshape(P, DIM, DIM), gu.reshape(P, DIM), uv.reshape(P),
                Lv.reshape(P), rot.reshape(P), gap.reshape(P, DIM))

    def bellman(self, z):
        M, q, v, _, _, _ = self.qp_data(z)
        value, idx = self.table.bellman_max(M, q, v)
        E = self.weights.shape[0]
        return value.reshape(E, -1), idx.reshape(E, -1)

    def coupling_form(self, m, z):
        """b(m, (w,u)) = int grad m . (grad u - w); zero without a multiplier space."""
        if self.space_m is None:
            return 0.0
        return float(np.asarray(m, float) @ (self._coupling @ np.asarray(z, float)[:self.n_fields]))

    # -- Gram matrix of |||.|||_lambda ----------------------------------------

    def gram_matrix(self):
        Kw = self.space_w.stiffness_matrix(self.quad_order)
        Ku = self.space_u.stiffness_matrix(self.quad_order)
        Mu = self.space_u.mass_matrix(self.quad_order)
        blocks = [Kw, Kw, 2 * self.lam * Ku + self.lam ** 2 * Mu]
        if self.space_m:
            blocks.append(self.space_m.stiffness_matrix(self.quad_order))
        return sp.block_diag(blocks, format="csr")

    def triple_norm_sq(self, z):
        G = self.gram_matrix()[:self.n_fields, :self.n_fields]
        x = np.asarray(z, float)[:self.n_fields]
        return float(x @ (G @ x))

    def dual_norm(self, r):
        """sup over constrained test vectors of r(y) / |||y|||."""
        if self._gram_lu is None:
            G = self.gram_matrix()
            B = self._constraints
            aug = sp.bmat([[G, B.T], [B, None]], format="csc")
            self._gram_lu = spla.splu(aug)
        rhs = np.concatenate([r, np.zeros(self.n_constraints)])
        y = self._gram_lu.solve(rhs)[:r.size]
        return float(np.sqrt(max(r @ y, 0.0)))

    def state_from_vector(self, z, policy_idx=None, iterations=0, history=None, converged=False):
        w, u, m = self.split(z)
        if policy_idx is None:
            _, policy_idx = self.bellman(z)
        return MixedState(
            w=FeFunction(self.space_w, w.copy()),
            u=FeFunction(self.space_u, u.copy()),
            m=FeFunction(self.space_m, m.copy()) if self.space_m else None,
            policy=self.table.controls[policy_idx],
            policy_index=policy_idx,
            iterations=iterations,
            residual_history=list(history or []),
            converged=converged,
            multipliers=np.asarray(z, float)[self.n_fields + self.nM:].copy(),
        )


@dataclass
class MixedState:
    w: FeFunction
    u: FeFunction
    m: Optional[FeFunction]
    policy: np.ndarray
    policy_index: np.ndarray
    iterations: int = 0
    residual_history: List[float] = field(default_factory=list)
    converged: bool = False
    multipliers: Optional[np.ndarray] = None

    def vector(self):
        parts = [self.w.coeffs, self.u.coeffs]
        if self.m is not None:
            parts.append(self.m.coeffs)
        if self.multipliers is not None:
            parts.append(self.multipliers)
        return np.concatenate(parts)

    def grad_m_norm(self):
        if self.m is None:
            return 0.0
        c = self.m.coeffs
        return float(np.sqrt(max(c @ (self.m.space.stiffness_matrix() @ c), 0.0)))

    def diagnostics(self):
        out = {"iterations": self.iterations, "converged": self.converged,
               "residual_history": [float(r) for r in self.residual_history]}
        if self.m is not None:
            out["grad_m_norm"] = self.grad_m_norm()
        return out


def semilinear_residual(problem, z):
    """Vector y -> a((w,u), y) over all field DOFs, with the true Bellman maximum."""
    F, _ = problem.bellman(z)
    local = np.einsum("eq,eq,eqi->ei", problem.weights, F, problem.L_rows)
    r = np.bincount(problem.global_dofs.ravel(), weights=local.ravel(), minlength=problem.n_fields)
    return r + problem._stab @ np.asarray(z, float)[:problem.n_fields]


def semilinear_form(problem, z, y):
    """a((w,u),(z,v)) for field coefficient vectors z and y."""
    return float(np.asarray(y, float)[:problem.n_fields] @ semilinear_residual(problem, z))


def residual_vector(problem, z):
    """Residual of the field and multiplier-space equations (constraint multipliers excluded)."""
    z = np.asarray(z, float)
    r = semilinear_residual(problem, z)
    if problem.space_m is None:
        return r
    _, _, m = problem.split(z)
    C = problem._coupling
    return np.concatenate([r + C.T @ m, C @ z[:problem.n_fields]])


def nonlinear_residual(problem, state_or_vector):
    z = state_or_vector.vector() if isinstance(state_or_vector, MixedState) else state_or_vector
    z = np.asarray(z, float)
    if z.size not in (problem.size, problem.n_fields + problem.nM):
        raise SpaceError(f"state of size {z.size} does not match problem size {problem.size}")
    return problem.dual_norm(residual_vector(problem, z))


def assemble_policy_system(problem, policy):
    """Sparse matrix and right-hand side of the frozen-policy linear mixed system."""
    policy = np.asarray(policy)
    E = problem.weights.shape[0]
    if policy.shape != (E, problem.n_qp):
        raise SpaceError(f"policy of shape {policy.shape} does not match ({E}, {problem.n_qp})")
    A, b, c, f, gamma = problem.table.frozen(policy.ravel())
    A = A.reshape(E, -1, DIM, DIM)
    b = b.reshape(E, -1, DIM)
    c, f, gamma = (arr.reshape(E, -1) for arr in (c, f, gamma))

    ell = np.zeros_like(problem.L_rows)
    dphi_w, dphi_u = problem.dphi_w, problem.dphi_u
    ell[..., problem.sl_w1] = -gamma[..., None] * np.einsum("eqd,eqad->eqa", A[:, :, 0, :], dphi_w)
    ell[..., problem.sl_w2] = -gamma[..., None] * np.einsum("eqd,eqad->eqa", A[:, :, 1, :], dphi_w)
    ell[..., problem.sl_u] = gamma[..., None] * (-np.einsum("eqd,eqad->eqa", b, dphi_u)
                                                 + c[..., None] * problem.phi_u[None])
    w = problem.weights
    K = problem._assemble_fields(np.einsum("eq,eqi,eqj->eij", w, problem.L_rows, ell)) + problem._stab
    local_rhs = np.einsum("eq,eq,eq,eqi->ei", w, gamma, f, problem.L_rows)
    rhs = np.bincount(problem.global_dofs.ravel(), weights=local_rhs.ravel(), minlength=problem.n_fields)

    B = problem._constraints
    if problem.space_m is None:
        matrix = sp.bmat([[K, B.T], [B, None]], format="csc")
    else:
        C = problem._coupling
        top = sp.hstack([K, C.T])
        mid = sp.hstack([C, sp.csr_matrix((problem.nM, problem.nM))])
        matrix = sp.bmat([[sp.vstack([top, mid]), B.T], [B, None]], format="csc")
    full_rhs = np.concatenate([rhs, np.zeros(problem.nM + problem.n_constraints)])
    if matrix.shape != (problem.size, problem.size):
        raise SpaceError(f"assembled system has shape {matrix.shape}, expected {problem.size}")
    return matrix, full_rhs


def solve_policy_system(problem, policy):
    """Direct solve of the frozen system with a few steps of iterative refinement."""
    matrix, rhs = assemble_policy_system(problem, policy)
    try:
        lu = spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:
        raise SolverError(f"sparse factorisation failed: {exc}") from exc
    z = lu.solve(rhs)
    scale = max(np.linalg.norm(rhs), 1e-300)
    rel = np.linalg.norm(matrix @ z - rhs) / scale
    for _ in range(REFINE_STEPS):
        if rel <= LINEAR_RTOL or not np.all(np.isfinite(z)):
            break
        z = z + lu.solve(rhs - matrix @ z)
        rel = np.linalg.norm(matrix @ z - rhs) / scale
    if not np.all(np.isfinite(z)) or rel > LINEAR_FAIL_RTOL:
        raise SolverError("frozen-policy linear solve is inaccurate",
                          diagnostics={"relative_residual": float(rel)})
    return z


def howard_solve(problem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, initial_policy=None):
    """Policy iteration: update the argmax policy, solve the frozen system, repeat.

    A policy that is already fixed while the residual is still above ``tol``
    means the residual has hit its rounding floor; the state is returned
    with ``converged=False`` so callers can report it.
    """
    if tol <= 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    E = problem.weights.shape[0]
    policy = (np.zeros((E, problem.n_qp), dtype=np.int64) if initial_policy is None
              else np.asarray(initial_policy, dtype=np.int64))
    z = solve_policy_system(problem, policy)
    res = nonlinear_residual(problem, z)
    history = [res]
    iterations = 1
    logger.debug("policy iteration %d: residual %.3e", iterations, res)

    while res > tol:
        _, new_policy = problem.bellman(z)
        if np.array_equal(new_policy, policy):
            logger.warning("policy iteration reached a fixed policy with residual %.3e > tol %.1e",
                           res, tol)
            break
        if iterations >= max_iter:
            state = problem.state_from_vector(z, iterations=iterations, history=history)
            raise ConvergenceError(f"policy iteration did not converge in {max_iter} iterations "
                                   f"(residual {res:.3e})", state=state, diagnostics=state.diagnostics())
        z_new = solve_policy_system(problem, new_policy)
        iterations += 1
        res_new = nonlinear_residual(problem, z_new)
        if res_new >= res:
            z_new, res_new = _damped_step(problem, z, z_new, res)
            if z_new is None:
                state = problem.state_from_vector(z, iterations=iterations, history=history)
                raise ConvergenceError("residual did not decrease after step halving",
                                       state=state, diagnostics=state.diagnostics())
            # a damped iterate solves no frozen system, so no policy is fixed yet
            new_policy = np.full_like(new_policy, -1)
        z, res, policy = z_new, res_new, new_policy
        history.append(res)
        logger.debug("policy iteration %d: residual %.3e", iterations, res)

    converged = bool(res <= tol)
    state = problem.state_from_vector(z, iterations=iterations, history=history, converged=converged)
    if converged:
        logger.info("howard_solve converged: %d iterations, residual %.3e", iterations, res)
    return state


def _damped_step(problem, z, z_new, res):
    t = 1.0
    for _ in range(MAX_HALVINGS):
        t *= 0.5
        trial = z + t * (z_new - z)
        r = nonlinear_residual(problem, trial)
        logger.debug("damping t=%.4g: residual %.3e", t, r)
        if r < res:
            return trial, r
    logger.warning("step halving failed to reduce residual %.3e", res)
    return None, None
