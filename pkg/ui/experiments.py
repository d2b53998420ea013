"""Convergence sweeps in h and sigma, the two-scale experiment and single solves behind the CLI."""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from core.control import gamma_at, get_family, sample_grid, select_lambda
from core.errors import HJBError
from core.fem import point_values
from solver.effective_solver import TwoScaleConfig, solve_effective, solve_eps_problem
from solver.homogenization import CellCache, CellProblemSpec, exact_H, solve_cell

logger = logging.getLogger(__name__)

FLOOR_RATIO = 0.9
SIGMA_WINDOW = 8.0
SLOPE_NOTE = ("slope_<metric> is the least-squares slope of log(metric) against log(parameter); "
              "the parameter is 1/h or 1/sigma, so a convergence order r shows up as slope -r")


@dataclass
class ConvergenceRecord:
    name: str
    parameter: str
    metrics: List[str]
    rows: List[dict] = field(default_factory=list)
    slopes: Dict[str, float] = field(default_factory=dict)
    columns: Dict[str, str] = field(default_factory=dict)
    certificate: Optional[dict] = None
    failures: List[dict] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)
    fit_rows: Optional[int] = None
    fit_windows: Dict[str, List[int]] = field(default_factory=dict)

    def frame(self):
        return pd.DataFrame(self.rows)

    def fit(self, rows=None, windows=None):
        """Fit slopes on the given number of leading rows (default: all).

        `windows` maps a metric to its own [start, stop) row range.
        """
        self.fit_rows = len(self.rows) if rows is None else rows
        self.fit_windows = {metric: [0, self.fit_rows] for metric in self.metrics}
        self.fit_windows.update({metric: list(window) for metric, window in (windows or {}).items()})
        self.slopes = {}
        frame = self.frame()
        for metric in self.metrics:
            start, stop = self.fit_windows[metric]
            if stop - start < 2:
                self.notes.append(f"fewer than two usable rows for {metric}: no slope fitted")
                continue
            if stop - start < 3:
                self.notes.append(f"slope of {metric} fitted on only two rows")
            window = frame.iloc[start:stop]
            pairs = list(zip(window[self.parameter], window[metric]))
            try:
                self.slopes[metric] = estimate_rate(pairs)
            except ValueError as exc:
                self.notes.append(f"no slope for {metric}: {exc}")
        return self.slopes

    def header_comment(self):
        lines = [f"{self.name}: one row per {self.parameter}"]
        lines += [f"{k}: {v}" for k, v in self.columns.items()]
        lines.append(SLOPE_NOTE)
        lines += [f"slope_{k} = {v:.4f}" for k, v in self.slopes.items()]
        return "\n".join(lines)

    def summary(self):
        return {"name": self.name, "parameter": self.parameter, "slopes": self.slopes,
                "fit_rows": self.fit_rows, "fit_windows": self.fit_windows, "certificate": self.certificate,
                "failures": self.failures, "notes": self.notes, "slope_convention": SLOPE_NOTE}


def estimate_rate(rows):
    """Least-squares slope of log(value) against log(parameter)."""
    data = np.asarray(rows, float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("need at least two (parameter, value) rows")
    if np.any(data <= 0) or not np.all(np.isfinite(data)):
        raise ValueError("parameters and values must be positive and finite")
    slope, _ = np.polyfit(np.log(data[:, 0]), np.log(data[:, 1]), 1)
    return float(slope)


def pre_floor_rows(errors, ratio=FLOOR_RATIO):
    """Number of leading rows before successive error ratios exceed `ratio`."""
    errors = np.asarray(errors, float)
    for k in range(len(errors) - 1):
        if not errors[k + 1] < ratio * errors[k]:
            return k + 1
    return len(errors)


def pairwise_orders(rows, parameter, metric, column="order"):
    """Order between consecutive rows, log(m_prev / m) / log(p / p_prev); the first row gets None."""
    previous = None
    for row in rows:
        value = row.get(metric)
        if previous is None or not value or not previous[1]:
            row[column] = None
        else:
            row[column] = float(np.log(previous[1] / value) / np.log(row[parameter] / previous[0]))
        previous = (row[parameter], value)


def _sweep(values, run_one, workers):
    """Runs one sweep point per value; results come back in input order."""
    if workers <= 1:
        return [run_one(v) for v in values]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, values))


def _cell_point(config, family, certificate, sigma, N, reference):
    spec = CellProblemSpec(config.s, config.p, config.R_matrix, sigma, family, certificate)
    start = time.perf_counter()
    try:
        sample = solve_cell(spec, N, config.tol, config.degree, config.max_iter)
    except HJBError as exc:
        logger.error("cell solve failed for sigma=%g N=%d: %s", sigma, N, exc)
        return None, {"sigma": sigma, "N": N, "error": str(exc),
                      "diagnostics": getattr(exc, "diagnostics", None)}
    row = {"N": N, "h": np.sqrt(2.0) / N, "sigma": sigma, "H": sample.value, "H_exact": reference,
           "rel_error": abs(sample.value - reference) / abs(reference),
           "eta": sample.eta.eta, "sqrt_eta": sample.eta.sqrt_eta, "eta_over_100": sample.eta.eta / 100.0,
           "iterations": sample.corrector.iterations, "converged": sample.corrector.converged,
           "residual": sample.corrector.residual_history[-1],
           "seconds": time.perf_counter() - start}
    return row, None


CELL_COLUMNS = {
    "N": "cell mesh subdivisions per axis",
    "h": "cell mesh size sqrt(2)/N",
    "sigma": "regularisation parameter",
    "H": "approximated effective Hamiltonian -sigma * int v_h",
    "H_exact": "closed-form effective Hamiltonian",
    "rel_error": "|H - H_exact| / |H_exact|",
    "eta": "a posteriori estimator (squared quantity)",
    "sqrt_eta": "square root of eta",
    "eta_over_100": "eta / 100",
    "iterations": "policy iterations",
    "converged": "policy iteration converged",
    "residual": "final dual-norm residual of the discrete equation",
    "seconds": "wall time [s]",
}


def run_exp1_h(config, workers=None):
    family = get_family(config.family)
    certificate = select_lambda(family)
    reference = float(exact_H(config.R_matrix, family, config.s))
    columns = dict(CELL_COLUMNS, inv_h="1/h", order="order of rel_error against the previous row")
    record = ConvergenceRecord("convergence_h", "inv_h", ["rel_error", "sqrt_eta", "eta_over_100"],
                               columns=columns, certificate=certificate.as_dict())
    points = _sweep(sorted(config.N_list),
                    lambda N: _cell_point(config, family, certificate, config.sigma, N, reference),
                    workers or config.workers)
    for row, failure in points:
        if failure:
            record.failures.append(failure)
        else:
            row["inv_h"] = 1.0 / row["h"]
            record.rows.append(row)
    pairwise_orders(record.rows, "inv_h", "rel_error")
    record.fit()
    if record.rows and record.rows[-1]["order"] is not None:
        record.notes.append(f"order of rel_error between the two finest meshes: {record.rows[-1]['order']:.4f}")
    logger.info("convergence in h: slopes %s", record.slopes)
    return record


def sigma_errors(rows, reference):
    """|H_sigma - H_sigma_min| / |H_exact| on the same mesh; the smallest sigma row gets None.

    Subtracting the smallest-sigma value removes the h-error floor shared by all rows.
    """
    if not rows:
        return
    floor = rows[-1]["H"]
    for row in rows[:-1]:
        row["sigma_error"] = abs(row["H"] - floor) / abs(reference)
    rows[-1]["sigma_error"] = None


def run_exp1_sigma(config, workers=None):
    family = get_family(config.family)
    certificate = select_lambda(family)
    reference = float(exact_H(config.R_matrix, family, config.s))
    columns = dict(CELL_COLUMNS, inv_sigma="1/sigma",
                   sigma_error="|H - H at the smallest sigma| / |H_exact|")
    record = ConvergenceRecord("convergence_sigma", "inv_sigma", ["rel_error", "sigma_error"],
                               columns=columns, certificate=certificate.as_dict())
    points = _sweep(sorted(config.sigmas, reverse=True),
                    lambda s: _cell_point(config, family, certificate, s, config.N, reference),
                    workers or config.workers)
    for row, failure in points:
        if failure:
            record.failures.append(failure)
        else:
            row["inv_sigma"] = 1.0 / row["sigma"]
            record.rows.append(row)
    sigma_errors(record.rows, reference)
    sigma_min = record.rows[-1]["sigma"] if record.rows else 0.0
    window = sum(1 for r in record.rows if r["sigma"] >= SIGMA_WINDOW * sigma_min)
    record.fit(pre_floor_rows([r["rel_error"] for r in record.rows]), windows={"sigma_error": [0, window]})
    logger.info("convergence in sigma: slopes %s, rel_error on %s pre-floor rows, sigma_error on %s rows",
                record.slopes, record.fit_rows, window)
    return record


def relative_errors(solution, reference):
    """Relative L2 and max-norm distances on the reference mesh (nested criss-cross meshes)."""
    ref_full = reference.full()
    ref_space, ref = ref_full.space, ref_full.coeffs
    coarse = solution.full()
    diff = point_values(coarse, ref_space.mesh.vertices) - ref
    mass = ref_space.mass_matrix()
    rel_l2 = np.sqrt(diff @ (mass @ diff)) / np.sqrt(ref @ (mass @ ref))
    rel_linf = np.max(np.abs(diff)) / np.max(np.abs(ref))
    return float(rel_l2), float(rel_linf)


EXP2_COLUMNS = {
    "omega_N": "macroscopic mesh subdivisions per axis",
    "h": "macroscopic mesh size sqrt(2)/N",
    "inv_h": "1/h",
    "rel_L2": "||u_h - u_eps||_L2 / ||u_eps||_L2",
    "rel_Linf": "||u_h - u_eps||_inf / ||u_eps||_inf",
    "objective": "final least-squares functional",
    "evaluations": "functional evaluations",
    "converged": "optimizer reported convergence",
    "seconds": "wall time [s]",
}


def reference_solution(config, family):
    """Oscillatory reference on eps_N, warm-started from the same problem on eps_N/4 and eps_N/2."""
    ref_config = TwoScaleConfig(omega_N=config.eps_N, max_evals=config.max_evals,
                                gtol=config.gtol, ftol=config.ftol)
    levels = [config.eps_N // k for k in (4, 2) if config.eps_N % k == 0 and config.eps_N // k >= 4]
    solution = None
    for N in levels + [config.eps_N]:
        solution = solve_eps_problem(config.eps, N, family, ref_config, initial=solution)
        logger.info("eps reference on N=%d: J=%.6e after %d evaluations, converged %s",
                    N, solution.objective, solution.evaluations, solution.converged)
    return solution


def two_scale_config(config, omega_N):
    return TwoScaleConfig(omega_N=omega_N, cell_N=config.cell_N, sigma=config.exp2_sigma, mode=config.mode,
                          gtol=config.gtol, ftol=config.ftol, max_evals=config.max_evals,
                          cell_tol=config.tol, workers=config.workers)


def run_exp2(config, reference=None):
    family = get_family(config.family)
    certificate = select_lambda(family)
    record = ConvergenceRecord("exp2", "inv_h", ["rel_L2", "rel_Linf"], columns=dict(EXP2_COLUMNS),
                               certificate=certificate.as_dict())
    record.notes.append(f"hamiltonian mode {config.mode}, eps = {config.eps}, reference N = {config.eps_N}")
    reference = reference or reference_solution(config, family)
    if not reference.converged:
        record.failures.append({"reference": config.eps_N, "error": reference.message})
    cache = CellCache()
    for omega_N in sorted(config.omega_N_list):
        if config.eps_N % omega_N:
            record.failures.append({"omega_N": omega_N, "error": f"does not divide eps_N={config.eps_N}"})
            continue
        start = time.perf_counter()
        try:
            solution = solve_effective(two_scale_config(config, omega_N), family, certificate, cache)
        except HJBError as exc:
            logger.error("effective solve failed for N=%d: %s", omega_N, exc)
            record.failures.append({"omega_N": omega_N, "error": str(exc),
                                    "diagnostics": getattr(exc, "diagnostics", None)})
            continue
        rel_l2, rel_linf = relative_errors(solution, reference)
        h = np.sqrt(2.0) / omega_N
        record.rows.append({"omega_N": omega_N, "h": h, "inv_h": 1.0 / h, "rel_L2": rel_l2,
                            "rel_Linf": rel_linf, "objective": solution.objective,
                            "evaluations": solution.evaluations, "converged": solution.converged,
                            "seconds": time.perf_counter() - start})
        if not solution.converged:
            record.failures.append({"omega_N": omega_N, "error": solution.message})
    record.fit()
    logger.info("two-scale experiment: slopes %s", record.slopes)
    return record


def check_cordes(config):
    family = get_family(config.family)
    grid = sample_grid(config.samples, family=family)
    start = time.perf_counter()
    certificate = select_lambda(family, grid)
    gamma = np.concatenate([np.ravel(gamma_at(family, certificate, grid.x, grid.y, alpha))
                            for alpha in family.controls])
    return {"family": family.name, "certificate": certificate.as_dict(),
            "gamma_range": [float(gamma.min()), float(gamma.max())],
            "seconds": time.perf_counter() - start}


def run_cell_solve(config):
    family = get_family(config.family)
    certificate = select_lambda(family)
    spec = CellProblemSpec(config.s, config.p, config.R_matrix, config.sigma, family, certificate)
    return solve_cell(spec, config.N, config.tol, config.degree, config.max_iter), certificate


def run_hbar(config):
    sample, certificate = run_cell_solve(config)
    return {"value": sample.value, "eta": sample.eta.eta, "iterations": sample.corrector.iterations,
            "converged": sample.corrector.converged, "residual": sample.corrector.residual_history[-1],
            "certificate": certificate.as_dict()}


def run_effective_solve(config):
    family = get_family(config.family)
    certificate = select_lambda(family) if config.mode == "cell" else None
    return solve_effective(two_scale_config(config, config.omega_N), family, certificate)


def run_eps_solve(config):
    family = get_family(config.family)
    cfg = TwoScaleConfig(omega_N=config.omega_N, max_evals=config.max_evals, gtol=config.gtol, ftol=config.ftol)
    return solve_eps_problem(config.eps, config.omega_N, family, cfg)
