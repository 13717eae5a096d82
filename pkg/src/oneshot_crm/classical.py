"""Maximum likelihood and minimum density power divergence estimation.

Both estimators are computed with the same cyclic coordinate descent: each
coordinate in turn takes a gradient step using the freshest values of the
others.  Asymptotic covariances use the sandwich ``J^-1 K J^-1 / n``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

from . import _kernels
from .model import (CountData, DistributionKind, DomainError, ProbabilityFloorWarning,
                    TestPlan, floor_probs, probs_and_jacobian)

log = logging.getLogger(__name__)

WALD_LEVEL = 0.95


class FitError(RuntimeError):
    """The optimizer could not produce an estimate."""


class SingularMatrixError(FitError):
    """An information matrix is numerically singular."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition number {condition:.3g})")
        self.condition = condition


@dataclass(frozen=True)
class FitConfig:
    """Coordinate-descent settings.

    ``alpha = 0`` selects maximum likelihood, ``alpha > 0`` the MDPDE.
    The step size is halved (at most ``max_halvings`` times) whenever a
    coordinate step would increase the objective, and restored each sweep.
    """

    alpha: float = 0.0
    learning_rate: float = 1e-3
    threshold: float = 1e-6
    max_iters: int = 50_000
    max_halvings: int = 20
    divergence_sweeps: int = 50

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.max_iters <= 0:
            raise ValueError("max_iters must be positive")


@dataclass
class FitResult:
    theta: np.ndarray
    objective: float
    iterations: int
    converged: bool
    alpha: float
    covariance: np.ndarray | None = None
    ci: np.ndarray | None = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        names = list(names) if names is not None else [f"theta{j}" for j in range(len(self.theta))]
        out = {
            "alpha": self.alpha,
            "estimate": dict(zip(names, map(float, self.theta))),
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
        }
        if self.covariance is not None:
            out["se"] = dict(zip(names, map(float, self.se)))
            out["ci"] = {nm: [float(lo), float(hi)] for nm, (lo, hi) in zip(names, self.ci)}
        return out


# ---------------------------------------------------------------- objectives

def log_likelihood(counts, probs) -> float:
    """Multinomial log-likelihood ``sum n_cell * ln p_cell`` without the constant."""
    n = _count_array(counts)
    p = np.asarray(probs, dtype=float)
    if np.any((p <= 0) & (n > 0)):
        return -math.inf
    used = n > 0
    return float(np.sum(n[used] * np.log(p[used])))


def dpd_objective(counts, probs, alpha: float) -> float:
    """Density power divergence between the empirical and model cell frequencies."""
    if not alpha > 0:
        raise ValueError("the divergence needs alpha > 0; use log_likelihood for alpha = 0")
    n = _count_array(counts)
    freq = n / n.sum()
    p = np.asarray(probs, dtype=float)
    return float(np.sum(p ** (alpha + 1))
                 - (1 + 1 / alpha) * np.sum(freq * p ** alpha)
                 + np.sum(freq ** (alpha + 1)) / alpha)


def _count_array(counts) -> np.ndarray:
    if isinstance(counts, CountData):
        return counts.as_array().astype(float)
    return np.asarray(counts, dtype=float)


class Objective:
    """Negative log-likelihood (``alpha = 0``) or DPD objective with analytic gradient."""

    def __init__(self, plan: TestPlan, dist, counts: CountData, alpha: float = 0.0):
        counts.check_plan(plan)
        self.plan = plan
        self.dist = DistributionKind.parse(dist)
        self.alpha = float(alpha)
        self.n_cells = counts.as_array().astype(float)
        self.n = float(counts.n)
        self.freq = self.n_cells / self.n
        if self.alpha > 0:
            self._const = float(np.sum(self.freq ** (self.alpha + 1)) / self.alpha)

    def _value_from_probs(self, p: np.ndarray) -> float:
        a = self.alpha
        if a == 0:
            used = self.n_cells > 0
            return float(-np.sum(self.n_cells[used] * np.log(p[used])))
        pa = p ** a
        return float(np.sum(pa * p) - (1 + 1 / a) * np.sum(self.freq * pa) + self._const)

    def value(self, theta) -> float:
        p, _ = probs_and_jacobian(self.plan, self.dist, theta, with_grad=False)
        return self._value_from_probs(floor_probs(p))

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        p, jac = probs_and_jacobian(self.plan, self.dist, theta)
        p = floor_probs(p)
        a = self.alpha
        if a == 0:
            weights = -self.n_cells / p
        else:
            weights = (a + 1) * (p ** a - self.freq * p ** (a - 1))
        return self._value_from_probs(p), weights @ jac

    def grad(self, theta) -> np.ndarray:
        return self.value_and_grad(theta)[1]

    def safe_value(self, theta) -> float:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                v = self.value(theta)
        except DomainError:
            return math.inf
        return v if math.isfinite(v) else math.inf


# ---------------------------------------------------------------- optimizer

def coordinate_descent(objective: Objective, theta0, config: FitConfig):
    """Cyclic coordinate descent over ``(c0, c1, gamma_1..gamma_k)``.

    Each sweep visits the coordinates in order, stepping ``theta_j -= h * dD/dtheta_j``
    at the freshest point.  A step that raises the objective is halved up to
    ``max_halvings`` times; a shape parameter pushed to zero or below is set to
    half its previous value instead.  Stops once no coordinate moved more than
    ``threshold`` in a sweep.

    Returns ``(theta, value, sweeps, converged)``.
    """
    theta0 = np.array(theta0, dtype=float)
    if theta0.shape != (objective.plan.n_params,) or not np.all(np.isfinite(theta0)) \
            or np.any(theta0[2:] <= 0):
        raise FitError("bad initial point: parameters outside the parameter space")
    theta, value, sweeps, status, hits = _kernels.cd_fit(
        *_kernels.kernel_args(objective.plan, objective.dist), objective.n_cells, objective.alpha,
        theta0, config.learning_rate, config.threshold, config.max_iters,
        config.max_halvings, config.divergence_sweeps)
    if hits:
        warnings.warn(f"cell probabilities clamped to the numeric floor {hits} times",
                      ProbabilityFloorWarning, stacklevel=3)
    if status == _kernels.BAD_START:
        raise FitError("bad initial point: objective is not finite")
    if status == _kernels.DIVERGED:
        raise FitError(f"objective increased for {config.divergence_sweeps} consecutive sweeps")
    if status == _kernels.BAD_GRADIENT:
        raise FitError("non-finite gradient during coordinate descent")
    if status == _kernels.MAX_ITERS:
        log.info("coordinate descent stopped at max_iters=%d without meeting the threshold",
                 config.max_iters)
    return theta, float(value), int(sweeps), status == _kernels.CONVERGED


def fit(plan: TestPlan, dist, counts: CountData, config: FitConfig, theta0,
        with_covariance: bool = True) -> FitResult:
    """Fit the MLE (``alpha = 0``) or the MDPDE by coordinate descent."""
    if counts.n_failures <= 0:
        raise DomainError("at least one observed failure is required")
    objective = Objective(plan, dist, counts, config.alpha)
    theta, value, sweeps, converged = coordinate_descent(objective, theta0, config)
    result = FitResult(theta=theta, objective=value, iterations=sweeps,
                       converged=converged, alpha=config.alpha)
    if with_covariance:
        try:
            cov = sandwich_covariance(plan, dist, theta, config.alpha, counts.n)
        except (SingularMatrixError, DomainError) as exc:
            log.warning("covariance unavailable: %s", exc)
        else:
            result.covariance = cov
            result.ci = wald_intervals(theta, cov)
    return result


# ---------------------------------------------------------------- asymptotics

def j_matrix(plan: TestPlan, dist, theta, alpha: float) -> np.ndarray:
    """``J_alpha = sum_cells p^(alpha-1) grad p grad p^T``."""
    p, jac = probs_and_jacobian(plan, dist, theta)
    p = floor_probs(p)
    return (jac * (p ** (alpha - 1))[:, None]).T @ jac


def k_matrix(plan: TestPlan, dist, theta, alpha: float) -> np.ndarray:
    """Variance of the per-unit score ``sum_cells Delta_cell p^(alpha-1) grad p``."""
    p, jac = probs_and_jacobian(plan, dist, theta)
    p = floor_probs(p)
    xi = (p ** alpha) @ jac
    return (jac * (p ** (2 * alpha - 1))[:, None]).T @ jac - np.outer(xi, xi)


def _checked_inverse(mat: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError(f"{what} is singular", float(cond))
    return np.linalg.inv(mat)


def asymptotic_covariance(plan: TestPlan, dist, theta, alpha: float) -> np.ndarray:
    """Unscaled sandwich ``J^-1 K J^-1``, the covariance of ``sqrt(n)(theta_hat - theta)``."""
    j_inv = _checked_inverse(j_matrix(plan, dist, theta, alpha), "J matrix")
    cov = j_inv @ k_matrix(plan, dist, theta, alpha) @ j_inv
    return (cov + cov.T) / 2


def sandwich_covariance(plan: TestPlan, dist, theta, alpha: float, n: int) -> np.ndarray:
    """Finite-sample covariance ``J^-1 K J^-1 / n`` of the estimator."""
    if n <= 0:
        raise ValueError("n must be positive")
    return asymptotic_covariance(plan, dist, theta, alpha) / n


def wald_intervals(theta, cov, level: float = WALD_LEVEL) -> np.ndarray:
    """Symmetric normal intervals, one ``(lower, upper)`` row per parameter."""
    z = norm.ppf(0.5 + level / 2)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    theta = np.asarray(theta, dtype=float)
    return np.column_stack([theta - z * se, theta + z * se])


# ---------------------------------------------------------------- tuning

@dataclass(frozen=True)
class TuningRow:
    alpha: float
    phi: float
    divergence: float
    trace: float
    theta: np.ndarray


@dataclass(frozen=True)
class TuningResult:
    alpha_opt: float
    rows: tuple[TuningRow, ...]

    @property
    def best(self) -> TuningRow:
        return next(r for r in self.rows if r.alpha == self.alpha_opt)


def tuning_criterion(plan, dist, counts: CountData, theta, alpha: float,
                     c1: float = 0.5, c2: float = 0.5) -> tuple[float, float, float]:
    """``C1 * D_alpha(theta) + C2 * tr(J^-1 K J^-1)``; returns (phi, divergence, trace)."""
    p, _ = probs_and_jacobian(plan, dist, theta, with_grad=False)
    div = dpd_objective(counts, floor_probs(p), alpha)
    trace = float(np.trace(asymptotic_covariance(plan, dist, theta, alpha)))
    return c1 * div + c2 * trace, div, trace


def select_tuning(plan: TestPlan, dist, counts: CountData, grid: Sequence[float], theta0,
                  c1: float = 0.5, c2: float = 0.5,
                  base: FitConfig | None = None) -> TuningResult:
    """Fit the MDPDE on each grid value and return the minimiser of the criterion.

    Ties go to the smaller alpha.  Grid points whose fit fails are skipped.
    """
    if not grid:
        raise ValueError("tuning grid is empty")
    if not (c1 > 0 and c2 > 0 and math.isclose(c1 + c2, 1.0)):
        raise ValueError("weights must be positive and sum to one")
    base = base or FitConfig()
    rows = []
    for alpha in sorted(float(a) for a in grid):
        if not alpha > 0:
            raise ValueError("tuning grid values must be positive")
        try:
            res = fit(plan, dist, counts, replace(base, alpha=alpha), theta0,
                      with_covariance=False)
            phi, div, trace = tuning_criterion(plan, dist, counts, res.theta, alpha, c1, c2)
        except (FitError, DomainError) as exc:
            warnings.warn(f"alpha={alpha}: fit failed ({exc}); skipped", RuntimeWarning,
                          stacklevel=2)
            continue
        rows.append(TuningRow(alpha, phi, div, trace, res.theta))
    if not rows:
        raise FitError("every tuning grid point failed to fit")
    best = min(rows, key=lambda r: (r.phi, r.alpha))
    return TuningResult(best.alpha, tuple(rows))
