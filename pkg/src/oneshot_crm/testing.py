"""Empirical Bayes factors for ball hypotheses and a bootstrap goodness-of-fit test."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bayes import PosteriorChains
from .classical import FitConfig, FitError, fit
from .model import CountData, DomainError, TestPlan, probs_and_jacobian

log = logging.getLogger(__name__)


class PriorOddsError(RuntimeError):
    """Prior draws fall entirely inside or outside the ball, so their odds are undefined."""


class BfCategory(str, enum.Enum):
    NEGATIVE = "Negative"
    BARE_MENTION = "Not worth more than a bare mention"
    POSITIVE = "Positive"
    STRONG = "Strong"
    VERY_STRONG = "Very Strong"


_BF_BREAKS = ((1.0, BfCategory.NEGATIVE), (3.0, BfCategory.BARE_MENTION),
              (20.0, BfCategory.POSITIVE), (150.0, BfCategory.STRONG))


def interpret_bf(bf01: float) -> BfCategory:
    """Evidence category for H0; a boundary value belongs to the upper class."""
    if not bf01 > 0:
        raise ValueError("Bayes factor must be positive")
    for upper, category in _BF_BREAKS:
        if bf01 < upper:
            return category
    return BfCategory.VERY_STRONG


@dataclass(frozen=True)
class HypothesisSpec:
    """``H0: ||theta - theta0|| <= eps_ball`` (Euclidean) against its complement."""

    theta0: np.ndarray
    eps_ball: float
    rho0: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "theta0", np.asarray(self.theta0, dtype=float))
        if not self.eps_ball > 0:
            raise ValueError("ball radius must be positive")
        if not 0 < self.rho0 < 1:
            raise ValueError("rho0 must lie in (0, 1)")

    def inside(self, draws) -> np.ndarray:
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        return np.linalg.norm(draws - self.theta0, axis=1) <= self.eps_ball


@dataclass(frozen=True)
class BfResult:
    prior_odds: float
    posterior_odds: float
    bf01: float
    category: BfCategory
    inside: int | None = None
    total: int | None = None
    censored: str | None = None  # "upper" or "lower" when a bound is reported

    def to_dict(self) -> dict:
        return {"prior_odds": self.prior_odds, "posterior_odds": self.posterior_odds,
                "bf01": self.bf01, "category": self.category.value,
                "inside": self.inside, "total": self.total, "censored": self.censored}


def bf_from_odds(posterior_odds: float, prior_odds: float) -> BfResult:
    """Bayes factor as the ratio of posterior to prior odds."""
    if not (prior_odds > 0 and posterior_odds > 0):
        raise ValueError("odds must be positive")
    bf = posterior_odds / prior_odds
    return BfResult(prior_odds, posterior_odds, bf, interpret_bf(bf))


def odds_in_ball(draws, hyp: HypothesisSpec) -> tuple[float, int, int]:
    """Fraction of draws inside the ball over the fraction outside."""
    mask = hyp.inside(draws)
    inside, total = int(mask.sum()), len(mask)
    if inside == total:
        return math.inf, inside, total
    return inside / (total - inside), inside, total


def bayes_factor_empirical(chains: PosteriorChains | np.ndarray, hyp: HypothesisSpec,
                           prior_draws: np.ndarray | None = None,
                           prior_odds: float | None = None) -> BfResult:
    """Empirical BF01 from posterior draws.

    Prior odds come from ``prior_odds`` if given, else from the share of
    ``prior_draws`` inside the ball, else from ``rho0 / (1 - rho0)``.  With no
    posterior draws inside (or outside) the ball the result is a censored bound.
    """
    draws = chains.flat if isinstance(chains, PosteriorChains) else np.asarray(chains)
    if prior_odds is None:
        if prior_draws is not None:
            prior_odds, n_in, n_tot = odds_in_ball(prior_draws, hyp)
            if n_in == 0 or n_in == n_tot:
                raise PriorOddsError(f"{n_in} of {n_tot} prior draws fall inside the ball; "
                                     "supply the prior odds directly")
        else:
            prior_odds = hyp.rho0 / (1 - hyp.rho0)
    if not prior_odds > 0:
        raise ValueError("prior odds must be positive")
    post_odds, inside, total = odds_in_ball(draws, hyp)
    censored = None
    if inside == 0:
        post_odds = 1.0 / total
        censored = "upper"
    elif inside == total:
        post_odds = float(total)
        censored = "lower"
    bf = post_odds / prior_odds
    return BfResult(prior_odds, post_odds, bf, interpret_bf(bf), inside, total, censored)


# ---------------------------------------------------------------- goodness of fit

def gof_statistic(counts: CountData, probs) -> float:
    """``sum |n_cell - n p_cell| / (n p_cell)`` over all cells including survival."""
    expected = counts.n * np.asarray(probs, dtype=float)
    if np.any(expected <= 0):
        raise DomainError("an expected cell count is zero; the fitted model is degenerate")
    return float(np.sum(np.abs(counts.as_array() - expected) / expected))


@dataclass
class GofResult:
    ts: float
    p_value: float
    theta_hat: np.ndarray
    replicates: np.ndarray = field(repr=False)
    failures: int = 0

    def to_dict(self) -> dict:
        return {"TS": self.ts, "p_value": self.p_value, "B": int(len(self.replicates)),
                "failed_refits": self.failures, "theta_hat": self.theta_hat.tolist()}


def gof_bootstrap(plan: TestPlan, dist, counts: CountData, B: int, seed: int, theta0,
                  config: FitConfig | None = None, theta_hat=None) -> GofResult:
    """Parametric bootstrap p-value for the distance statistic at the MLE.

    Replicates are drawn from the fitted cell probabilities and refitted with
    the same settings, warm-started at the fitted value.  A replicate whose
    refit fails is dropped and counted.
    """
    if B < 100:
        raise ValueError("use at least 100 bootstrap replicates")
    config = config or FitConfig()
    if theta_hat is None:
        theta_hat = fit(plan, dist, counts, config, theta0, with_covariance=False).theta
    theta_hat = np.asarray(theta_hat, dtype=float)
    p_hat, _ = probs_and_jacobian(plan, dist, theta_hat, with_grad=False)
    ts = gof_statistic(counts, p_hat)
    rng = np.random.default_rng(seed)
    reps, failures = [], 0
    for _ in range(B):
        boot = CountData.from_array(rng.multinomial(counts.n, p_hat))
        try:
            th = fit(plan, dist, boot, config, theta_hat, with_covariance=False).theta
            p_b, _ = probs_and_jacobian(plan, dist, th, with_grad=False)
            reps.append(gof_statistic(boot, p_b))
        except (FitError, DomainError) as exc:
            log.debug("bootstrap refit failed: %s", exc)
            failures += 1
    if not reps:
        raise FitError("every bootstrap refit failed")
    reps = np.asarray(reps)
    return GofResult(ts, float(np.mean(reps >= ts)), theta_hat, reps, failures)
