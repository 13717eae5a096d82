"""``oneshot-crm`` command line.

Usage: ``oneshot-crm <command> --config <path> [--seed N] [--out DIR]``

Exit status is 0 on success, 2 for configuration or usage errors and 3 when
a numerical step fails.  Tables are written as CSV, single results as JSON.
Set ``ONESHOT_CRM_LOG_LEVEL`` (e.g. ``DEBUG``) to change log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bayes import SamplerError, hpd_interval, rbe, sample_posterior, sample_prior
from .classical import FitError, fit, select_tuning
from .config import ConfigError, RunConfig
from .datasets import DatasetError, counts_from_parts, load_dataset
from .model import CountData, DomainError
from .robustness import InsufficientSampleError, gross_error_sensitivity, if_mdpde_table
from .sim import BayesEstimator, ClassicalEstimator, SimScenario, SimulationError, run_study
from .testing import HypothesisSpec, PriorOddsError, bayes_factor_empirical, gof_bootstrap

log = logging.getLogger("oneshot_crm")

COMMANDS = ("simulate", "fit", "tune", "bayes", "gof", "bf", "influence")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (FitError, DomainError, SamplerError, SimulationError,
                  InsufficientSampleError, PriorOddsError, np.linalg.LinAlgError, FloatingPointError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oneshot-crm",
                     description="Robust inference for one-shot device step-stress tests.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override every seed in the configuration")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    return parser


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def load_counts(cfg: RunConfig, plan) -> CountData:
    if cfg.data.file is not None:
        return load_dataset(cfg.data_path(), plan, cfg.plan.time_scale)
    if cfg.data.failures is None:
        raise ConfigError("this command needs data: set data.file or data.failures")
    counts = counts_from_parts(cfg.data.failures, cfg.data.n, cfg.data.survivors)
    counts.check_plan(plan)
    return counts


# ---------------------------------------------------------------- commands

def cmd_fit(cfg: RunConfig, out: Path) -> None:
    plan = cfg.test_plan()
    counts = load_counts(cfg, plan)
    names = plan.param_names()
    rows, results = [], []
    for alpha in cfg.classical.alphas:
        res = fit(plan, cfg.model.kind(), counts, cfg.classical.fit_config(alpha), cfg.initial())
        results.append(res.to_dict(names))
        for j, name in enumerate(names):
            se = res.se[j] if res.se is not None else np.nan
            lo, hi = res.ci[j] if res.ci is not None else (np.nan, np.nan)
            rows.append([f"{alpha:g}", name, _fmt(res.theta[j]), _fmt(se), _fmt(lo), _fmt(hi)])
        label = "MLE" if alpha == 0 else f"MDPDE alpha={alpha:g}"
        print(f"{label}: " + " ".join(f"{n}={v:.6f}" for n, v in zip(names, res.theta))
              + ("" if res.converged else " (not converged)"))
    _write_csv(out / "fit.csv", ["alpha", "parameter", "estimate", "se", "lower", "upper"], rows)
    _write_json(out / "fit.json", results)


def cmd_tune(cfg: RunConfig, out: Path) -> None:
    plan = cfg.test_plan()
    counts = load_counts(cfg, plan)
    res = select_tuning(plan, cfg.model.kind(), counts, cfg.classical.grid, cfg.initial(),
                        cfg.classical.c1, cfg.classical.c2, cfg.classical.fit_config())
    names = plan.param_names()
    _write_csv(out / "tune.csv", ["alpha", "phi", "divergence", "trace", *names],
               [[f"{r.alpha:g}", _fmt(r.phi), _fmt(r.divergence), _fmt(r.trace),
                 *map(_fmt, r.theta)] for r in res.rows])
    _write_json(out / "tune.json", {"alpha_opt": res.alpha_opt,
                                    "phi": res.best.phi, "c1": cfg.classical.c1,
                                    "c2": cfg.classical.c2})
    print(f"alpha_opt={res.alpha_opt:g}")


def _posterior(cfg: RunConfig, plan, counts, alpha):
    dist = cfg.model.kind()
    start = fit(plan, dist, counts, cfg.classical.fit_config(alpha), cfg.initial(),
                with_covariance=False).theta
    return sample_posterior(plan, dist, counts, alpha, cfg.bayes.prior_spec(),
                            cfg.bayes.hmc_config(plan.n_params), start), start


def cmd_bayes(cfg: RunConfig, out: Path) -> None:
    plan = cfg.test_plan()
    counts = load_counts(cfg, plan)
    names = plan.param_names()
    rows, summary = [], []
    for alpha in cfg.bayes.alphas:
        chains, _ = _posterior(cfg, plan, counts, alpha)
        est = rbe(chains)
        label = "BE" if alpha == 0 else "RBE"
        for j, name in enumerate(names):
            lo, hi = hpd_interval(chains, j)
            rows.append([label, f"{alpha:g}", cfg.bayes.prior, name, _fmt(est[j]), _fmt(lo), _fmt(hi)])
        summary.append({"estimator": label, "alpha": alpha, "prior": cfg.bayes.prior,
                        "estimate": dict(zip(names, map(float, est))),
                        "acceptance": chains.acceptance.tolist(),
                        "nonfinite_proposals": chains.nonfinite.tolist(),
                        "draws": chains.n_draws})
        print(f"{label} alpha={alpha:g}: " + " ".join(f"{n}={v:.6f}" for n, v in zip(names, est)))
    _write_csv(out / "bayes.csv",
               ["estimator", "alpha", "prior", "parameter", "estimate", "hpd_lower", "hpd_upper"],
               rows)
    _write_json(out / "bayes.json", summary)


def cmd_gof(cfg: RunConfig, out: Path) -> None:
    plan = cfg.test_plan()
    counts = load_counts(cfg, plan)
    res = gof_bootstrap(plan, cfg.model.kind(), counts, cfg.test.B, cfg.test.seed,
                        cfg.initial(), cfg.classical.fit_config(0.0))
    _write_json(out / "gof.json", res.to_dict())
    print(f"TS={res.ts:.6f} p={res.p_value:.3f}")


def _hypothesis(cfg: RunConfig) -> HypothesisSpec:
    if cfg.test.theta0 is None or cfg.test.eps_ball is None:
        raise ConfigError("bf needs test.theta0 and test.eps_ball")
    return HypothesisSpec(np.asarray(cfg.test.theta0), cfg.test.eps_ball, cfg.test.rho0)


def cmd_bf(cfg: RunConfig, out: Path) -> None:
    plan = cfg.test_plan()
    counts = load_counts(cfg, plan)
    hyp = _hypothesis(cfg)
    rows, results = [], []
    for alpha in cfg.bayes.alphas:
        chains, start = _posterior(cfg, plan, counts, alpha)
        prior_draws = prior_odds = None
        if cfg.test.prior_odds == "sample":
            prior_draws = sample_prior(plan, cfg.model.kind(), counts, cfg.bayes.prior_spec(),
                                       cfg.bayes.hmc_config(plan.n_params), start).flat
        elif cfg.test.prior_odds != "rho0":
            prior_odds = float(cfg.test.prior_odds)
        res = bayes_factor_empirical(chains, hyp, prior_draws, prior_odds)
        results.append({"alpha": alpha, "prior": cfg.bayes.prior, **res.to_dict()})
        rows.append([f"{alpha:g}", cfg.bayes.prior, _fmt(res.prior_odds), _fmt(res.posterior_odds),
                     _fmt(res.bf01), res.category.value, res.censored or ""])
        bound = {"upper": "<", "lower": ">"}.get(res.censored, "")
        print(f"alpha={alpha:g} BF01{bound}={res.bf01:.6f} ({res.category.value})")
    _write_csv(out / "bf.csv", ["alpha", "prior", "prior_odds", "posterior_odds", "BF01",
                                "category", "censored"], rows)
    _write_json(out / "bf.json", results)


def cmd_influence(cfg: RunConfig, out: Path) -> None:
    plan = cfg.test_plan()
    counts = load_counts(cfg, plan)
    names = plan.param_names()
    labels = plan.cell_labels()
    rows, summary = [], []
    for alpha in cfg.classical.alphas:
        theta = fit(plan, cfg.model.kind(), counts, cfg.classical.fit_config(alpha),
                    cfg.initial(), with_covariance=False).theta
        table = if_mdpde_table(plan, cfg.model.kind(), theta, alpha)
        ges, where = gross_error_sensitivity(table)
        for c, row in enumerate(table):
            rows.append(["MLE" if alpha == 0 else "MDPDE", f"{alpha:g}", c, labels[c],
                         *map(_fmt, row), _fmt(np.linalg.norm(row))])
        summary.append({"alpha": alpha, "gross_error_sensitivity": ges, "worst_cell": labels[where]})
        print(f"alpha={alpha:g} gross-error sensitivity={ges:.6f} at {labels[where]}")
    _write_csv(out / "influence.csv", ["estimator", "alpha", "cell", "label", *names, "norm"], rows)
    _write_json(out / "influence.json", summary)


def cmd_simulate(cfg: RunConfig, out: Path) -> None:
    plan = cfg.test_plan()
    sim = cfg.sim
    if sim.theta_true is None:
        raise ConfigError("simulate needs sim.theta_true")
    dist = cfg.model.kind().value
    estimators = [ClassicalEstimator(a, cfg.classical.fit_config(a)) for a in sim.alphas]
    estimators += [BayesEstimator(a, cfg.bayes.prior_spec(), cfg.bayes.hmc_config(plan.n_params),
                                  cfg.classical.fit_config(a)) for a in sim.bayes_alphas]
    scenarios = {"pure": SimScenario(plan, dist, sim.theta_true, None, sim.n, sim.reps, sim.seed)}
    if sim.theta_contam is not None:
        scenarios["contaminated"] = SimScenario(plan, dist, sim.theta_true, sim.theta_contam,
                                                sim.n, sim.reps, sim.seed)
    for label, scenario in scenarios.items():
        table = run_study(scenario, estimators, start=cfg.initial(), workers=sim.workers)
        table.to_csv(out / f"simulate_{label}.csv")
        print(f"{label}: wrote {len(table.rows)} rows to {out / f'simulate_{label}.csv'}")


HANDLERS = {"fit": cmd_fit, "tune": cmd_tune, "bayes": cmd_bayes, "gof": cmd_gof,
            "bf": cmd_bf, "influence": cmd_influence, "simulate": cmd_simulate}


def _apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    cfg.bayes = replace(cfg.bayes, seed=seed)
    cfg.test = replace(cfg.test, seed=seed)
    cfg.sim = replace(cfg.sim, seed=seed)
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ONESHOT_CRM_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        cfg = _apply_seed(RunConfig.load(args.config), args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out)
    except (ConfigError, DatasetError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
