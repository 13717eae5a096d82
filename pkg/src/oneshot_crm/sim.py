"""Monte Carlo harness: data generation, replicated estimation, and summary metrics."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .bayes import HmcConfig, PriorSpec, rbe, sample_posterior
from .classical import FitConfig, FitError, fit
from .model import CountData, DomainError, TestPlan, cell_probabilities, probs_and_jacobian

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.10
METRIC_COLUMNS = ("estimator", "alpha", "parameter", "MAB", "MSE", "CP", "AW", "reps", "failures")


class SimulationError(RuntimeError):
    """Too many replicates failed to produce an estimate."""


@dataclass(frozen=True)
class SimScenario:
    plan: TestPlan
    dist: str
    theta_true: np.ndarray
    theta_contam: np.ndarray | None = None
    n: int = 100
    reps: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta_true", np.asarray(self.theta_true, dtype=float))
        if self.theta_contam is not None:
            object.__setattr__(self, "theta_contam", np.asarray(self.theta_contam, dtype=float))
        if self.reps < 1 or self.n < 1:
            raise ValueError("reps and n must be positive")

    @property
    def generating_theta(self) -> np.ndarray:
        return self.theta_true if self.theta_contam is None else self.theta_contam


def generate_counts(plan: TestPlan, dist, theta, n: int, rng: np.random.Generator) -> CountData:
    """One multinomial sample of ``n`` devices over the plan's cells."""
    p = cell_probabilities(plan, dist, theta).as_array()
    return CountData.from_array(rng.multinomial(n, p / p.sum()))


def mixture_probs(p: np.ndarray, eps: float, cell: int) -> np.ndarray:
    """Cell probabilities of ``(1 - eps) F + eps * point mass`` in ``cell``."""
    out = (1.0 - eps) * np.asarray(p, dtype=float)
    out[cell] += eps
    return out


def generate_mixture_counts(plan: TestPlan, dist, theta, n: int, eps: float, cell: int,
                            rng: np.random.Generator) -> CountData:
    """Counts from the model contaminated by a point mass in one cell."""
    p = mixture_probs(cell_probabilities(plan, dist, theta).as_array(), eps, cell)
    return CountData.from_array(rng.multinomial(n, p))


# ---------------------------------------------------------------- estimators

@dataclass
class Estimate:
    theta: np.ndarray
    ci: np.ndarray | None = None


class Estimator(Protocol):
    name: str
    alpha: float

    def __call__(self, plan: TestPlan, dist, counts: CountData, start: np.ndarray,
                 seed: np.random.SeedSequence) -> Estimate: ...


@dataclass(frozen=True)
class ClassicalEstimator:
    """MLE (``alpha = 0``) or MDPDE by coordinate descent, with Wald intervals."""

    alpha: float = 0.0
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def name(self) -> str:
        return "MLE" if self.alpha == 0 else "MDPDE"

    def __call__(self, plan, dist, counts, start, seed=None) -> Estimate:
        res = fit(plan, dist, counts, replace(self.config, alpha=self.alpha), start)
        return Estimate(res.theta, res.ci)


@dataclass(frozen=True)
class BayesEstimator:
    """Posterior mean under the pseudo-posterior (``alpha = 0``: ordinary posterior).

    Chains start at the classical estimate with the same ``alpha``.
    """

    alpha: float
    prior: PriorSpec
    hmc: HmcConfig
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def name(self) -> str:
        return ("BE" if self.alpha == 0 else "RBE") + f"-{self.prior.kind.value}"

    def __call__(self, plan, dist, counts, start, seed=None) -> Estimate:
        start = ClassicalEstimator(self.alpha, self.config)(plan, dist, counts, start).theta
        chain_seed = int(seed.generate_state(1)[0]) if seed is not None else self.hmc.seed
        hmc = replace(self.hmc, seed=chain_seed)
        chains = sample_posterior(plan, dist, counts, self.alpha, self.prior, hmc, start)
        return Estimate(rbe(chains))


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricRow:
    estimator: str
    alpha: float
    parameter: str
    mab: float
    mse: float
    cp: float
    aw: float
    reps: int
    failures: int

    def as_tuple(self) -> tuple:
        return (self.estimator, self.alpha, self.parameter, self.mab, self.mse,
                self.cp, self.aw, self.reps, self.failures)


@dataclass
class MetricTable:
    rows: list[MetricRow]

    def get(self, estimator: str, alpha: float, parameter: str) -> MetricRow:
        for r in self.rows:
            if r.estimator == estimator and math.isclose(r.alpha, alpha) and r.parameter == parameter:
                return r
        raise KeyError((estimator, alpha, parameter))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in self.rows:
            writer.writerow([r.estimator, f"{r.alpha:g}", r.parameter, f"{r.mab:.6f}",
                             f"{r.mse:.6f}", "" if math.isnan(r.cp) else f"{r.cp:.1f}",
                             "" if math.isnan(r.aw) else f"{r.aw:.6f}", r.reps, r.failures])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _replicate(args):
    scenario, estimators, start, seed = args
    data_seed, *est_seeds = seed.spawn(1 + len(estimators))
    rng = np.random.default_rng(data_seed)
    counts = generate_counts(scenario.plan, scenario.dist, scenario.generating_theta,
                             scenario.n, rng)
    out = []
    for est, s in zip(estimators, est_seeds):
        try:
            out.append(est(scenario.plan, scenario.dist, counts, start, s))
        except (FitError, DomainError, RuntimeError) as exc:
            log.debug("replicate dropped for %s: %s", est.name, exc)
            out.append(None)
    return out


def summarize(estimates: Sequence[Estimate | None], truth: np.ndarray, names: Sequence[str],
              estimator: str, alpha: float) -> list[MetricRow]:
    """MAB, MSE, coverage (%) and mean interval width per parameter."""
    good = [e for e in estimates if e is not None]
    failures = len(estimates) - len(good)
    rows = []
    for j, name in enumerate(names):
        err = [e.theta[j] - truth[j] for e in good]
        m = len(err)
        mab = math.fsum(abs(d) for d in err) / m if m else math.nan
        mse = math.fsum(d * d for d in err) / m if m else math.nan
        with_ci = [e.ci[j] for e in good if e.ci is not None]
        if with_ci:
            cp = 100.0 * sum(lo <= truth[j] <= hi for lo, hi in with_ci) / len(with_ci)
            aw = math.fsum(hi - lo for lo, hi in with_ci) / len(with_ci)
        else:
            cp = aw = math.nan
        rows.append(MetricRow(estimator, alpha, name, mab, mse, cp, aw, m, failures))
    return rows


def run_study(scenario: SimScenario, estimators: Sequence, start=None,
              workers: int = 1) -> MetricTable:
    """Replicate data generation and estimation; metrics are against ``theta_true``.

    Every estimator starts from ``start`` (default: the true parameters).
    Replicate ``r`` uses the ``r``-th stream spawned from the scenario seed, so
    results do not depend on ``workers``.
    """
    if not estimators:
        raise ValueError("no estimators given")
    start = scenario.theta_true if start is None else np.asarray(start, dtype=float)
    seeds = np.random.SeedSequence(scenario.seed).spawn(scenario.reps)
    jobs = [(scenario, list(estimators), start, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_replicate(j) for j in jobs]
    names = scenario.plan.param_names()
    rows = []
    for e, est in enumerate(estimators):
        per_est = [r[e] for r in results]
        failed = sum(x is None for x in per_est)
        if failed > MAX_FAILURE_SHARE * scenario.reps:
            raise SimulationError(f"{est.name} (alpha={est.alpha}) failed on {failed} of "
                                  f"{scenario.reps} replicates")
        rows.extend(summarize(per_est, scenario.theta_true, names, est.name, est.alpha))
    return MetricTable(rows)


def bootstrap_bias_rmse(plan: TestPlan, dist, counts: CountData, estimator, B: int, seed: int,
                        start) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parametric bootstrap bias and RMSE of an estimator around its own estimate.

    Returns ``(theta_hat, bias, rmse)``.
    """
    if B < 100:
        raise ValueError("use at least 100 bootstrap replicates")
    root = np.random.SeedSequence(seed)
    fit_seed, *boot_seeds = root.spawn(B + 1)
    theta_hat = estimator(plan, dist, counts, np.asarray(start, dtype=float), fit_seed).theta
    p_hat, _ = probs_and_jacobian(plan, dist, theta_hat, with_grad=False)
    estimates, failures = [], 0
    for s in boot_seeds:
        data_seed, est_seed = s.spawn(2)
        boot = CountData.from_array(np.random.default_rng(data_seed).multinomial(counts.n, p_hat))
        try:
            estimates.append(estimator(plan, dist, boot, theta_hat, est_seed).theta)
        except (FitError, DomainError, RuntimeError):
            failures += 1
    if failures > MAX_FAILURE_SHARE * B:
        raise SimulationError(f"{failures} of {B} bootstrap fits failed")
    diffs = np.asarray(estimates) - theta_hat
    bias = np.array([math.fsum(col) / len(col) for col in diffs.T])
    rmse = np.sqrt([math.fsum(c * c for c in col) / len(col) for col in diffs.T])
    return theta_hat, bias, rmse
