import logging
from dataclasses import dataclass

import numpy as np

from solver.mixed_solver import lipschitz_constant, monotonicity_constant

logger = logging.getLogger(__name__)


@dataclass
class EstimatorReport:
    """eta = ||F_gamma||^2 + sigma1 ||rot w_h||^2 + sigma2 ||w_h - grad u_h||^2 with per-element terms."""
    eta: float
    term_F: float
    term_rot: float
    term_gap: float
    local: np.ndarray  # (E, 3): F, rot, gap contributions

    @property
    def sqrt_eta(self):
        return float(np.sqrt(self.eta))

    def subset(self, elements):
        """Estimator terms restricted to a set of elements."""
        part = self.local[np.asarray(elements)].sum(axis=0)
        return float(part.sum()), part

    def as_dict(self):
        return {"eta": self.eta, "sqrt_eta": self.sqrt_eta, "term_F": self.term_F,
                "term_rot": self.term_rot, "term_gap": self.term_gap}


def estimate(problem, state, quad_order=None):
    if quad_order is not None and quad_order != problem.quad_order:
        problem = problem.with_quad_order(quad_order)
    z = state.vector()
    F, _ = problem.bellman(z)
    _, _, _, _, rot, gap = problem.qp_data(z)
    w = problem.weights
    E = w.shape[0]
    rot = rot.reshape(E, -1)
    gap = gap.reshape(E, -1, 2)
    local = np.column_stack([
        np.sum(w * F ** 2, axis=1),
        problem.sigma1 * np.sum(w * rot ** 2, axis=1),
        problem.sigma2 * np.sum(w * np.sum(gap ** 2, axis=-1), axis=1),
    ])
    term_F, term_rot, term_gap = (float(t) for t in local.sum(axis=0))
    return EstimatorReport(term_F + term_rot + term_gap, term_F, term_rot, term_gap, local)


def reliability_bound(problem, report):
    """Upper bound for |||error|||_lambda^2."""
    cm = monotonicity_constant(problem.delta)
    return 2.0 / cm * (report.term_F / cm + report.term_rot + report.term_gap)


def efficiency_terms(report):
    return 0.5 * report.term_F + report.term_rot + report.term_gap


def efficiency_constant(problem):
    return lipschitz_constant(problem.delta, problem.lam) + (1.0 - problem.delta) / 2.0
