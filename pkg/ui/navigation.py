import argparse
import json
import logging
import sys

from core.dataexcel import ResultSaver
from core.errors import HJBError
from ui.config import EXPERIMENTS, config_keys, load_config
from ui import experiments

logger = logging.getLogger(__name__)

COLUMN_HELP = """\
CSV columns:
  convergence-h / convergence-sigma: N, h, sigma, H, H_exact, rel_error, eta,
    sqrt_eta, eta_over_100, iterations, converged, seconds, inv_h | inv_sigma
  exp2: omega_N, h, inv_h, rel_L2, rel_Linf, objective, evaluations, converged, seconds
  effective-solve / eps-solve / cell-solve: vertex, x, y, value (vertex CSV)
Slopes are d log(metric) / d log(parameter) with parameter 1/h or 1/sigma,
so an order r shows up as slope -r.
"""


class CommandApp:
    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="hjb-homogenize",
            description="Mixed FEM for periodic HJB problems, effective Hamiltonians and two-scale solves.",
            epilog=COLUMN_HELP,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        self.parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        self.parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
        sub = self.parser.add_subparsers(dest="command", required=True)
        for name in EXPERIMENTS:
            p = sub.add_parser(name, epilog=COLUMN_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
            p.add_argument("--config", help="flat key = value configuration file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help=f"override a configuration key; keys: {', '.join(config_keys())}")
            p.add_argument("--family", help="coefficient family name")
            p.add_argument("--seed", type=int, help="seed recorded with the run")
            p.add_argument("--workers", type=int, help="worker threads for sweep points and cell solves")
            p.add_argument("--output", help="output folder")
            p.add_argument("--excel", action="store_true", default=None, help="also append to results.xlsx")
        self.failures = []

    def setup_logging(self, args):
        level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    def main_menu(self, argv=None):
        args = self.parser.parse_args(argv)
        self.setup_logging(args)
        try:
            config = load_config(args.config, args.set, experiment=args.command, family=args.family,
                                 seed=args.seed, workers=args.workers, output=args.output, excel=args.excel)
            saver = ResultSaver(config.output, excel=config.excel)
            handler = getattr(self, args.command.replace("-", "_"))
            handler(config, saver)
        except HJBError as exc:
            logger.error("%s failed: %s", args.command, exc)
            self.failures.append({"command": args.command, "error": str(exc),
                                  "type": type(exc).__name__,
                                  "diagnostics": getattr(exc, "diagnostics", None)})
        if self.failures:
            print(json.dumps({"failures": self.failures}, indent=2, default=str))
            return 1
        return 0

    def _record(self, record, config, saver):
        path = saver.save_record(record, config)
        self.failures.extend(record.failures)
        print(f"{record.name}: {len(record.rows)} rows -> {path}")
        for metric, slope in record.slopes.items():
            print(f"  slope {metric}: {slope:.3f} (order {-slope:.3f})")

    def _solution(self, name, solution, config, saver):
        saver.save_function(name, solution.full())
        saver.save_function(f"{name}_htilde", solution.htilde)
        saver.append_jsonl(name, [{"evaluation": k, "objective": j} for k, j in enumerate(solution.trace)])
        saver.save_sidecar(name, {"config": config.resolved(), "solution": solution.diagnostics()})
        if not solution.converged:
            self.failures.append({"command": name, "error": solution.message})
        print(f"{name}: objective {solution.objective:.6e} after {solution.evaluations} evaluations")

    def _check_corrector(self, name, sample):
        if not sample.corrector.converged:
            self.failures.append({"command": name, "error": "policy iteration stopped above tolerance",
                                  "diagnostics": sample.corrector.diagnostics()})

    def check_cordes(self, config, saver):
        result = experiments.check_cordes(config)
        saver.save_sidecar("check_cordes", {"config": config.resolved(), **result})
        cert = result["certificate"]
        lo, hi = result["gamma_range"]
        print(f"{result['family']}: lambda={cert['lambda']:.4g} delta={cert['delta']:.4g} "
              f"margin={cert['margin']:.3g} gamma in [{lo:.3g}, {hi:.3g}]")

    def cell_solve(self, config, saver):
        sample, certificate = experiments.run_cell_solve(config)
        saver.save_function("cell_corrector", sample.corrector.u)
        saver.save_function("cell_gradient", sample.corrector.w)
        saver.append_jsonl("cell_solve", [sample.corrector.diagnostics()])
        saver.save_sidecar("cell_solve", {"config": config.resolved(), "certificate": certificate.as_dict(),
                                          "sample": sample.as_dict(), "estimator": sample.eta.as_dict()})
        self._check_corrector("cell_solve", sample)
        print(f"H = {sample.value:.12g}, eta = {sample.eta.eta:.3e}")

    def hbar(self, config, saver):
        result = experiments.run_hbar(config)
        saver.save_sidecar("hbar", {"config": config.resolved(), **result})
        if not result["converged"]:
            self.failures.append({"command": "hbar", "error": "policy iteration stopped above tolerance",
                                  "residual": result["residual"]})
        print(json.dumps({k: result[k] for k in ("value", "eta", "iterations")}))

    def convergence_h(self, config, saver):
        self._record(experiments.run_exp1_h(config), config, saver)

    def convergence_sigma(self, config, saver):
        self._record(experiments.run_exp1_sigma(config), config, saver)

    def exp2(self, config, saver):
        self._record(experiments.run_exp2(config), config, saver)

    def effective_solve(self, config, saver):
        self._solution("effective_solve", experiments.run_effective_solve(config), config, saver)

    def eps_solve(self, config, saver):
        self._solution("eps_solve", experiments.run_eps_solve(config), config, saver)


def main(argv=None):
    return CommandApp().main_menu(argv)


if __name__ == "__main__":
    sys.exit(main())
