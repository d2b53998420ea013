"""Control-indexed coefficients, Cordes certificates and the Bellman maximum.

Coefficient callables are vectorised: they receive x and y as (..., 2)
arrays and a scalar control alpha, and return A (..., 2, 2), b (..., 2),
c (...) and f (...).
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from core.errors import CordesError, FamilyError

logger = logging.getLogger(__name__)

DIM = 2
DELTA_CAP = 1.0 - 1e-6
DELTA_MIN = 1e-6
LAMBDA_GRID = np.logspace(-3.0, 3.0, 241)
DEFAULT_SAMPLES = 64
DEFAULT_CONTROL_POINTS = 33


class ControlGrid:
    def __init__(self, values):
        vals = np.unique(np.asarray(values, dtype=float).ravel())
        if vals.size == 0:
            raise FamilyError("control grid must not be empty")
        self.values = vals
        self.values.setflags(write=False)

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values)

    def __repr__(self):
        return f"ControlGrid({self.values.tolist()})"

    @classmethod
    def uniform(cls, n=DEFAULT_CONTROL_POINTS, lo=0.0, hi=1.0):
        return cls(np.linspace(lo, hi, n))


@dataclass(frozen=True)
class OracleData:
    """Closed-form data of families A = (a0 + alpha a1) B, b = 0, c = 1, f = f0 constant."""
    a0: Callable
    a1: Callable
    B: np.ndarray
    f0: float = 1.0


class CoefficientFamily:
    def __init__(self, name, A, b, c, f, controls=None, x_dependent=False,
                 affine_in_control=False, oracle=None):
        self.name = name
        self.A = A
        self.b = b
        self.c = c
        self.f = f
        if controls is None:
            controls = ControlGrid([0.0, 1.0]) if affine_in_control else ControlGrid.uniform()
        self.controls = controls if isinstance(controls, ControlGrid) else ControlGrid(controls)
        self.x_dependent = x_dependent
        self.affine_in_control = affine_in_control
        self.oracle = oracle

    def __repr__(self):
        return f"CoefficientFamily({self.name!r}, controls={len(self.controls)})"

    def evaluate(self, x, y, alpha):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        shape = y.shape[:-1]
        A = np.broadcast_to(self.A(x, y, alpha), shape + (DIM, DIM))
        b = np.broadcast_to(self.b(x, y, alpha), shape + (DIM,))
        c = np.broadcast_to(self.c(x, y, alpha), shape)
        f = np.broadcast_to(self.f(x, y, alpha), shape)
        return A, b, c, f

    def with_controls(self, controls):
        fam = CoefficientFamily(self.name, self.A, self.b, self.c, self.f, controls,
                                self.x_dependent, self.affine_in_control, self.oracle)
        return fam


@dataclass(frozen=True)
class SampleGrid:
    x: np.ndarray
    y: np.ndarray
    description: str

    def __post_init__(self):
        if self.y.shape[0] == 0:
            raise CordesError("sample grid is empty")


def sample_grid(n=DEFAULT_SAMPLES, x_points=None, family=None):
    """Uniform n x n grid over the periodicity cell.

    For x-dependent families the y grid is paired with every x point
    (default: a 5 x 5 grid over the closed macroscopic square).
    """
    t = np.arange(n) / n
    Y1, Y2 = np.meshgrid(t, t, indexing="ij")
    y = np.column_stack([Y1.ravel(), Y2.ravel()])
    if x_points is None:
        if family is not None and family.x_dependent:
            s = np.linspace(0.0, 1.0, 5)
            S1, S2 = np.meshgrid(s, s, indexing="ij")
            x_points = np.column_stack([S1.ravel(), S2.ravel()])
        else:
            x_points = np.zeros((1, DIM))
    x_points = np.atleast_2d(np.asarray(x_points, float))
    xs = np.repeat(x_points, y.shape[0], axis=0)
    ys = np.tile(y, (x_points.shape[0], 1))
    desc = f"{n}x{n} y-grid x {x_points.shape[0]} x-point(s)"
    return SampleGrid(xs, ys, desc)


@dataclass(frozen=True)
class CordesCertificate:
    lam: float
    delta: float
    margin: float
    sample_description: str
    zeta1: float = float("nan")
    zeta2: float = float("nan")

    def __post_init__(self):
        if not self.lam > 0:
            raise CordesError(f"lambda must be positive, got {self.lam}")
        if not 0 < self.delta < 1:
            raise CordesError(f"delta must lie in (0, 1), got {self.delta}")

    def scaled(self, sigma):
        return replace(self, lam=self.lam * sigma,
                       sample_description=f"{self.sample_description}; lambda scaled by sigma={sigma:g}")

    def as_dict(self):
        return {"lambda": self.lam, "delta": self.delta, "margin": self.margin,
                "sample_grid": self.sample_description, "zeta1": self.zeta1, "zeta2": self.zeta2}


def _cordes_terms(family, grid):
    tr, a2, b2, c = [], [], [], []
    for alpha in family.controls:
        A, b, cc, _ = family.evaluate(grid.x, grid.y, alpha)
        tr.append(np.trace(A, axis1=-2, axis2=-1))
        a2.append(np.sum(A * A, axis=(-2, -1)))
        b2.append(np.sum(b * b, axis=-1))
        c.append(cc)
    return [np.concatenate(v) for v in (tr, a2, b2, c)]


def ellipticity_constants(family, grid):
    lo, hi = np.inf, -np.inf
    for alpha in family.controls:
        A, _, _, _ = family.evaluate(grid.x, grid.y, alpha)
        if not np.allclose(A, np.swapaxes(A, -1, -2)):
            raise CordesError(f"diffusion of family {family.name!r} is not symmetric")
        ev = np.linalg.eigvalsh(A)
        lo = min(lo, float(ev.min()))
        hi = max(hi, float(ev.max()))
    return lo, hi


def cordes_slack(family, lam, delta, grid):
    """Smallest sampled value of RHS - LHS of the Cordes inequality."""
    if lam <= 0 or not 0 < delta < 1:
        raise CordesError(f"need lambda > 0 and delta in (0, 1), got {lam}, {delta}")
    tr, a2, b2, c = _cordes_terms(family, grid)
    lhs = a2 + b2 / (2 * lam) + c ** 2 / lam ** 2
    rhs = (tr + c / lam) ** 2 / (DIM + delta)
    return float(np.min(rhs - lhs))


def select_lambda(family, grid=None, lambdas=LAMBDA_GRID):
    """Grid search over lambda maximising the certified delta (ties: smallest lambda)."""
    grid = grid or sample_grid(family=family)
    zeta1, zeta2 = ellipticity_constants(family, grid)
    if zeta1 <= 0:
        raise CordesError(f"family {family.name!r} is not uniformly elliptic on the samples "
                          f"(smallest eigenvalue {zeta1:g})")
    tr, a2, b2, c = _cordes_terms(family, grid)
    if np.any(c <= 0):
        raise CordesError(f"family {family.name!r} has a nonpositive zeroth-order coefficient")

    lam = np.asarray(lambdas, float)[:, None]
    lhs = a2[None] + b2[None] / (2 * lam) + c[None] ** 2 / lam ** 2
    delta_max = np.min((tr[None] + c[None] / lam) ** 2 / lhs, axis=1) - DIM - 1e-12
    delta = np.minimum(delta_max, DELTA_CAP)
    best = int(np.argmax(delta))
    if delta[best] < DELTA_MIN:
        raise CordesError(f"no (lambda, delta) with delta >= {DELTA_MIN:g} found for family "
                          f"{family.name!r}; best delta {delta[best]:.3g}")
    lam_best, delta_best = float(lam[best, 0]), float(delta[best])
    margin = cordes_slack(family, lam_best, delta_best, grid)
    cert = CordesCertificate(lam_best, delta_best, margin, grid.description, zeta1, zeta2)
    logger.info("Cordes certificate for %s: lambda=%.4g delta=%.4g margin=%.3g",
                family.name, lam_best, delta_best, margin)
    return cert


def gamma_from(A, b, c, lam):
    tr = np.trace(A, axis1=-2, axis2=-1)
    den = np.sum(A * A, axis=(-2, -1)) + np.sum(b * b, axis=-1) / (2 * lam) + c ** 2 / lam ** 2
    if np.any(den <= 0):
        raise CordesError("nonpositive denominator in gamma; ellipticity is violated")
    return (tr + c / lam) / den


def gamma_at(family, certificate, x, y, alpha):
    A, b, c, _ = family.evaluate(x, y, alpha)
    return gamma_from(A, b, c, certificate.lam)


def l_lambda(div_w, u, lam):
    return -div_w + lam * u


class CoefficientTable:
    """Coefficients and gamma tabulated on a point set for every control, shapes (K, P, ...)."""

    def __init__(self, family, certificate, x, y):
        self.controls = family.controls.values
        A, b, c, f, g = [], [], [], [], []
        for alpha in self.controls:
            Aa, ba, ca, fa = family.evaluate(x, y, alpha)
            A.append(Aa)
            b.append(ba)
            c.append(ca)
            f.append(fa)
            g.append(gamma_from(Aa, ba, ca, certificate.lam))
        self.A = np.stack(A)
        self.b = np.stack(b)
        self.c = np.stack(c)
        self.f = np.stack(f)
        self.gamma = np.stack(g)

    def residuals(self, M, q, v):
        """gamma^a (-A^a:M - b^a.q + c^a v - f^a) for every control, (K, P)."""
        lin = -np.sum(self.A * M[None], axis=(-2, -1)) - np.sum(self.b * q[None], axis=-1) + self.c * v[None]
        return self.gamma * (lin - self.f)

    def bellman_max(self, M, q, v):
        res = self.residuals(M, q, v)
        idx = np.argmax(res, axis=0)
        return np.take_along_axis(res, idx[None], axis=0)[0], idx

    def frozen(self, policy):
        """Coefficients selected by a policy (P,) of control indices."""
        pick = lambda arr: np.take_along_axis(arr, policy.reshape((1, -1) + (1,) * (arr.ndim - 2)), axis=0)[0]
        return pick(self.A), pick(self.b), pick(self.c), pick(self.f), pick(self.gamma)


def bellman_max(family, certificate, x, y, M, q, v):
    """sup over the control grid of the gamma-scaled residual; returns (value, argmax alpha)."""
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    x, y = np.broadcast_arrays(x, y)
    P = y.shape[0]
    M = np.broadcast_to(np.asarray(M, float), (P, DIM, DIM))
    q = np.broadcast_to(np.asarray(q, float), (P, DIM))
    v = np.broadcast_to(np.asarray(v, float), (P,))
    table = CoefficientTable(family, certificate, x, y)
    value, idx = table.bellman_max(M, q, v)
    alpha = table.controls[idx]
    if P == 1:
        return float(value[0]), float(alpha[0])
    return value, alpha


# -- registry ---------------------------------------------------------------

FO_B = np.array([[2.0, -1.0], [-1.0, 4.0]])


def _ones(x, y, alpha=None):
    return np.ones(np.shape(y)[:-1])


def _zeros2(x, y, alpha=None):
    return np.zeros(np.shape(y)[:-1] + (DIM,))


def _fo_a1(x, y):
    return np.sin(2 * np.pi * y[..., 0]) ** 2 * np.cos(2 * np.pi * y[..., 1]) ** 2 + 1.0


def _zero_a1(x, y):
    return np.zeros(np.shape(y)[:-1])


def _graded_a0(x, y):
    return 1.0 + 0.5 * x[..., 0] + 0.0 * y[..., 0]


def _separable_family(name, a0, a1, B=FO_B, f0=1.0, x_dependent=False, controls=(0.0, 1.0)):
    A = lambda x, y, alpha: (a0(x, y) + alpha * a1(x, y))[..., None, None] * B
    f = lambda x, y, alpha: f0 * _ones(x, y)
    return CoefficientFamily(name, A, _zeros2, _ones, f, controls, x_dependent=x_dependent,
                             affine_in_control=True, oracle=OracleData(a0, a1, B, f0))


def fo_benchmark():
    return _separable_family("fo-benchmark", _ones, _fo_a1)


def fo_benchmark_a1_zero():
    return _separable_family("fo-benchmark-a1-zero", _ones, _zero_a1)


def fo_benchmark_graded():
    return _separable_family("fo-benchmark-graded", _graded_a0, _fo_a1, x_dependent=True)


def laplace_family(f=None, name="laplace"):
    A = lambda x, y, alpha: np.broadcast_to(np.eye(DIM), np.shape(y)[:-1] + (DIM, DIM))
    f = f or (lambda x, y, alpha: np.zeros(np.shape(y)[:-1]))
    return CoefficientFamily(name, A, _zeros2, _ones, f, [0.0], affine_in_control=True)


def manufactured_family():
    """A = I, c = 1, f = (8 pi^2 + 1) cos(2 pi y1) cos(2 pi y2); exact u = cos cos."""
    k = 8 * np.pi ** 2 + 1
    f = lambda x, y, alpha: k * np.cos(2 * np.pi * y[..., 0]) * np.cos(2 * np.pi * y[..., 1])
    return laplace_family(f, name="manufactured")


def constant_two_control():
    """y-independent family with drift: A = (1 + alpha) diag(1, 2), b = (alpha, 1 - alpha)/2, f = 1 + alpha."""
    D = np.diag([1.0, 2.0])
    A = lambda x, y, alpha: np.broadcast_to((1 + alpha) * D, np.shape(y)[:-1] + (DIM, DIM))
    b = lambda x, y, alpha: np.broadcast_to(0.5 * np.array([alpha, 1 - alpha]), np.shape(y)[:-1] + (DIM,))
    f = lambda x, y, alpha: (1 + alpha) * _ones(x, y)
    return CoefficientFamily("constant-two-control", A, b, _ones, f, [0.0, 1.0], affine_in_control=True)


FAMILIES = {
    "fo-benchmark": fo_benchmark,
    "fo-benchmark-a1-zero": fo_benchmark_a1_zero,
    "fo-benchmark-graded": fo_benchmark_graded,
    "laplace": laplace_family,
    "manufactured": manufactured_family,
    "constant-two-control": constant_two_control,
}


def get_family(name, controls=None):
    if name not in FAMILIES:
        raise FamilyError(f"unknown coefficient family {name!r}; known: {sorted(FAMILIES)}")
    family = FAMILIES[name]()
    if controls is not None:
        family = family.with_controls(controls)
    return family
