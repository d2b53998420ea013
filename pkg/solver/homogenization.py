"""Approximate correctors, the approximated effective Hamiltonian and its closed-form reference.

A cell problem freezes the macroscopic point s and the arguments (p, R) of
the Hamiltonian, regularises with sigma > 0 and solves the resulting periodic
HJB problem in the fast variable y with the mixed method. The value
-sigma * int_Y v approximates H(s, p, R).
"""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from core.control import DIM, CoefficientFamily, cordes_slack, fo_benchmark, sample_grid
from core.errors import ConfigError, FamilyError, HJBError, SolverError
from core.mesh import PERIODIC, build_uniform_mesh
from core.quadrature import gauss_square
from solver.estimator import EstimatorReport, estimate
from solver.mixed_solver import DEFAULT_MAX_ITER, DEFAULT_TOL, MixedProblem, MixedState, howard_solve

logger = logging.getLogger(__name__)

HARMONIC_MEAN_POINTS = 64
KEY_DECIMALS = 12
FD_STEP = 1e-6


@dataclass
class CellProblemSpec:
    s: np.ndarray
    p: np.ndarray
    R: np.ndarray
    sigma: float
    family: CoefficientFamily
    certificate: object

    def __post_init__(self):
        self.s = np.asarray(self.s, float).reshape(DIM)
        self.p = np.asarray(self.p, float).reshape(DIM)
        self.R = np.asarray(self.R, float).reshape(DIM, DIM)
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not np.allclose(self.R, self.R.T, rtol=0.0, atol=1e-14):
            raise ConfigError(f"R must be symmetric, got {self.R.tolist()}")

    @property
    def lam_sigma(self):
        return self.sigma * self.certificate.lam

    def key(self):
        data = np.concatenate([self.s, self.p, self.R.ravel(), [self.sigma, self.certificate.lam]])
        return (self.family.name,) + tuple(np.round(data, KEY_DECIMALS).tolist())


@dataclass
class EffectiveSample:
    value: float
    corrector: MixedState
    eta: EstimatorReport
    spec: CellProblemSpec
    mesh_N: int

    def recompute(self):
        u = self.corrector.u
        return -self.spec.sigma * float(u.space.integral_weights() @ u.coeffs)

    def as_dict(self):
        return {"value": self.value, "eta": self.eta.eta, "sqrt_eta": self.eta.sqrt_eta,
                "iterations": self.corrector.iterations, "converged": self.corrector.converged,
                "N": self.mesh_N, "sigma": self.spec.sigma}


def freeze_cell_family(spec):
    """y-only family: A_s, no drift, c = sigma, source A_s:R + b_s.p + f_s."""
    base = spec.family
    s, p, R, sigma = spec.s, spec.p, spec.R, spec.sigma

    def at_s(y):
        return np.broadcast_to(s, np.shape(y))

    def A(x, y, alpha):
        return base.evaluate(at_s(y), y, alpha)[0]

    def b(x, y, alpha):
        return np.zeros(np.shape(y)[:-1] + (DIM,))

    def c(x, y, alpha):
        return np.full(np.shape(y)[:-1], sigma)

    def g(x, y, alpha):
        As, bs, _, fs = base.evaluate(at_s(y), y, alpha)
        return np.sum(As * R, axis=(-2, -1)) + bs @ p + fs

    name = f"{base.name}@cell"
    return CoefficientFamily(name, A, b, c, g, base.controls,
                             affine_in_control=base.affine_in_control)


def solve_cell(spec, N, tol=DEFAULT_TOL, degree=1, max_iter=DEFAULT_MAX_ITER):
    mesh = build_uniform_mesh(N, PERIODIC)
    frozen = freeze_cell_family(spec)
    cert = spec.certificate.scaled(spec.sigma)
    problem = MixedProblem(mesh, frozen, cert, degree_w=degree, degree_u=degree)
    state = howard_solve(problem, tol=tol, max_iter=max_iter)
    # the unit cell has measure one, so the integral is the mean
    value = -spec.sigma * float(problem.space_u.integral_weights() @ state.u.coeffs)
    report = estimate(problem, state)
    logger.debug("cell problem s=%s sigma=%g N=%d: H=%.12g eta=%.3e",
                 spec.s.tolist(), spec.sigma, N, value, report.eta)
    return EffectiveSample(value, state, report, spec, N)


class CellCache:
    """Thread-safe map from rounded cell problem data to solved samples."""

    def __init__(self):
        self.cache = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        with self._lock:
            return len(self.cache)

    def solve(self, spec, N, tol=DEFAULT_TOL, degree=1):
        key = spec.key() + (int(N), float(tol), int(degree))
        with self._lock:
            if key in self.cache:
                self.hits += 1
                return self.cache[key]
            self.misses += 1
        sample = solve_cell(spec, N, tol, degree)
        with self._lock:
            return self.cache.setdefault(key, sample)

    def clear(self):
        with self._lock:
            self.cache.clear()


_harmonic_cache = {}
_harmonic_lock = threading.Lock()


def harmonic_means(family, s=None, n=HARMONIC_MEAN_POINTS):
    """(int 1/a0)^-1 and (int 1/(a0 + a1))^-1 over the cell, by tensor Gauss quadrature."""
    oracle = family.oracle
    if oracle is None:
        raise FamilyError(f"family {family.name!r} has no closed-form effective Hamiltonian")
    s = np.zeros(DIM) if s is None else np.asarray(s, float).reshape(DIM)
    key = (family.name, n) + tuple(s.tolist())
    with _harmonic_lock:
        if key in _harmonic_cache:
            return _harmonic_cache[key]
    y, w = gauss_square(n)
    x = np.broadcast_to(s, y.shape)
    a0 = oracle.a0(x, y)
    a01 = a0 + oracle.a1(x, y)
    means = (1.0 / float(w @ (1.0 / a0)), 1.0 / float(w @ (1.0 / a01)))
    with _harmonic_lock:
        _harmonic_cache[key] = means
    return means


def exact_H(R, family=None, s=None):
    """Closed-form H(R) = max(-m0 B:R, -m1 B:R) - f0 for separable families, m0, m1 harmonic means."""
    if family is None:
        family = fo_benchmark()
    means = np.array(harmonic_means(family, s))
    R = np.asarray(R, float)
    BR = np.sum(family.oracle.B * R, axis=(-2, -1))
    branches = -np.multiply.outer(BR, means)
    return np.max(branches, axis=-1) - family.oracle.f0


class Hamiltonian:
    """Evaluates H(s, p, R) on a batch; shapes s (n,2), p (n,2), R (n,2,2) -> (n,).

    `derivatives` returns dH/dR11, dH/dR12 (both off-diagonal entries moved
    together), dH/dR22, dH/dp1, dH/dp2 as an (n, 5) array; the default uses
    forward differences.
    """
    mode = "generic"
    depends_on_p = True

    def __call__(self, s, p, R):
        raise NotImplementedError

    def derivatives(self, s, p, R, base=None, step=FD_STEP):
        base = self(s, p, R) if base is None else base
        n = R.shape[0]
        scale = step * np.maximum(1.0, np.abs(R).max(axis=(-2, -1)))
        out = np.zeros((n, 5))
        for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 1))):
            Rt = R.copy()
            Rt[:, i, j] += scale
            if i != j:
                Rt[:, j, i] += scale
            out[:, k] = (self(s, p, Rt) - base) / scale
        if self.depends_on_p:
            pscale = step * np.maximum(1.0, np.abs(p).max(axis=-1))
            for k in range(DIM):
                pt = p.copy()
                pt[:, k] += pscale
                out[:, 3 + k] = (self(s, pt, R) - base) / pscale
        return out


def active_derivatives(A, b, idx):
    """Envelope derivatives of max_a(-A^a:R - b^a.p - ...) at the active control index."""
    n = idx.size
    Aa = A[idx, np.arange(n)]
    ba = b[idx, np.arange(n)]
    return np.column_stack([-Aa[:, 0, 0], -(Aa[:, 0, 1] + Aa[:, 1, 0]), -Aa[:, 1, 1],
                            -ba[:, 0], -ba[:, 1]])


class ExactHamiltonian(Hamiltonian):
    """Closed-form H; x-dependent families get their harmonic means at each point s."""
    mode = "exact"
    depends_on_p = False

    def __init__(self, family, s=None):
        self.family = family
        self.s = s
        self.means = np.array(harmonic_means(family, s))

    def means_at(self, s):
        s = np.asarray(s, float).reshape(-1, DIM)
        if not self.family.x_dependent:
            return np.broadcast_to(self.means, (s.shape[0], 2))
        return np.array([harmonic_means(self.family, point) for point in s])

    def _branches(self, s, R):
        BR = np.sum(self.family.oracle.B * np.asarray(R, float), axis=(-2, -1))
        return -BR[:, None] * self.means_at(s)

    def __call__(self, s, p, R):
        return np.max(self._branches(s, R), axis=-1) - self.family.oracle.f0

    def derivatives(self, s, p, R, base=None, step=FD_STEP):
        means = self.means_at(s)
        m = means[np.arange(means.shape[0]), np.argmax(self._branches(s, R), axis=-1)]
        B = self.family.oracle.B
        return np.column_stack([-m * B[0, 0], -m * (B[0, 1] + B[1, 0]), -m * B[1, 1],
                                np.zeros_like(m), np.zeros_like(m)])


class CellHamiltonian(Hamiltonian):
    """H_{sigma,h} from cached cell problem solves, evaluated concurrently per batch item."""
    mode = "cell"

    def __init__(self, family, certificate, sigma, N, tol=DEFAULT_TOL, degree=1, workers=1, cache=None):
        self.family = family
        self.certificate = certificate
        self.sigma = sigma
        self.N = N
        self.tol = tol
        self.degree = degree
        self.workers = max(1, int(workers))
        self.cache = cache if cache is not None else CellCache()
        ticks = np.linspace(0.0, 1.0, 9)
        Y1, Y2 = np.meshgrid(ticks, ticks)
        y = np.column_stack([Y1.ravel(), Y2.ravel()])
        self.depends_on_p = any(np.any(family.evaluate(y, y, a)[1] != 0) for a in family.controls)

    def one(self, i, s, p, R):
        spec = CellProblemSpec(s, p, R, self.sigma, self.family, self.certificate)
        try:
            return self.cache.solve(spec, self.N, self.tol, self.degree).value
        except HJBError as exc:
            raise SolverError(f"cell problem at element {i} failed: {exc}",
                              diagnostics={"element": i, "R": spec.R.tolist()}) from exc

    def __call__(self, s, p, R):
        n = R.shape[0]
        if self.workers == 1:
            return np.array([self.one(i, s[i], p[i], R[i]) for i in range(n)])
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            values = pool.map(lambda i: self.one(i, s[i], p[i], R[i]), range(n))
            return np.fromiter(values, float, count=n)


def frozen_certificate_slack(spec, samples=64):
    """Cordes slack of the frozen cell family under (sigma lambda, delta)."""
    frozen = freeze_cell_family(spec)
    cert = spec.certificate.scaled(spec.sigma)
    return cordes_slack(frozen, cert.lam, cert.delta, sample_grid(samples))


def constant_hamiltonian(family, s, p, R):
    """sup_a(-A:R - b.p - f) for coefficients that do not depend on y."""
    y = np.zeros((1, DIM))
    x = np.asarray(s, float).reshape(1, DIM)
    vals = []
    for alpha in family.controls:
        A, b, _, f = family.evaluate(x, y, alpha)
        vals.append(-np.sum(A[0] * R) - b[0] @ p - f[0])
    return float(max(vals))

