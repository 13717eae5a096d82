"""Cumulative-risk step-stress model for one-shot device data.

Lifetimes at stress level ``i`` follow a Lehman-family law
``F_i(t) = 1 - exp(-lambda_i * Q(t; gamma_i))`` with the log-linear link
``lambda_i = exp(c0 + c1 * x_i)``.  After each stress change the hazard is
interpolated linearly over a lag of length ``delta`` so that it stays
continuous.  Devices are inspected at fixed times, so the observable data
are interval failure counts plus the survivors at termination.

The parameter vector is always laid out as ``(c0, c1, gamma_1, ..., gamma_k)``.
Probability vectors are laid out cell by cell in inspection order with the
survival cell last.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-300


class DomainError(ValueError):
    """Input outside the domain where the model is defined."""


class ProbabilityFloorWarning(RuntimeWarning):
    """A cell probability was clamped to the numeric floor."""


class DistributionKind(enum.Enum):
    """Built-in members of the Lehman family, identified by ``Q(t; gamma)``."""

    WEIBULL = "weibull"
    GOMPERTZ = "gompertz"

    @classmethod
    def parse(cls, value: "str | DistributionKind") -> "DistributionKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown distribution kind {value!r}") from None

    def q(self, t, g):
        """Q(t; gamma)."""
        if self is DistributionKind.WEIBULL:
            return t ** g
        return np.expm1(g * t)

    def dq_dt(self, t, g):
        """Q'(t; gamma), the derivative in time."""
        if self is DistributionKind.WEIBULL:
            return g * t ** (g - 1.0)
        return g * np.exp(g * t)

    def dq_dg(self, t, g):
        """Derivative of Q(t; gamma) with respect to gamma."""
        if self is DistributionKind.WEIBULL:
            return t ** g * np.log(t)
        return t * np.exp(g * t)

    def d2q_dtdg(self, t, g):
        """Derivative of Q'(t; gamma) with respect to gamma."""
        if self is DistributionKind.WEIBULL:
            return t ** (g - 1.0) * (1.0 + g * np.log(t))
        return np.exp(g * t) * (1.0 + g * t)


@dataclass(frozen=True)
class TestPlan:
    """Geometry of a step-stress experiment with intermediate inspections.

    Parameters
    ----------
    stresses : sequence of float
        Stress level ``x_i`` applied during level ``i``.
    inspection_times : sequence of sequences
        Inspection times for each level; the last one of level ``i`` is the
        stress change point ``tau_i`` (the final one terminates the test).
    delta : float
        Lag after each stress change during which the hazard is linear.
    """

    __test__ = False  # not a pytest class

    stresses: tuple[float, ...]
    inspection_times: tuple[tuple[float, ...], ...]
    delta: float

    def __init__(self, stresses: Sequence[float],
                 inspection_times: Sequence[Sequence[float]], delta: float):
        object.__setattr__(self, "stresses", tuple(float(x) for x in stresses))
        object.__setattr__(self, "inspection_times",
                           tuple(tuple(float(t) for t in level) for level in inspection_times))
        object.__setattr__(self, "delta", float(delta))
        self._validate()

    @classmethod
    def from_grid(cls, stresses, grid, change_points, delta) -> "TestPlan":
        """Build a plan from one flat inspection grid and the change points."""
        grid = [float(t) for t in grid]
        levels, start = [], 0
        for tau in change_points:
            stop = next((j for j, t in enumerate(grid) if np.isclose(t, tau)), None)
            if stop is None or stop < start:
                raise DomainError(f"change point {tau} is not on the inspection grid")
            levels.append(grid[start:stop + 1])
            start = stop + 1
        if start != len(grid):
            raise DomainError("inspection times beyond the last change point")
        return cls(stresses, levels, delta)

    def _validate(self):
        k = len(self.stresses)
        if k < 1:
            raise DomainError("a plan needs at least one stress level")
        if len(self.inspection_times) != k:
            raise DomainError("one inspection-time list is required per stress level")
        if any(len(level) < 1 for level in self.inspection_times):
            raise DomainError("every stress level needs at least one inspection")
        if not np.all(np.isfinite(self.stresses)):
            raise DomainError("stress levels must be finite")
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise DomainError("lag delta must be positive")
        grid = self.grid
        if not np.all(np.isfinite(grid)) or grid[0] <= 0:
            raise DomainError("inspection times must be finite and positive")
        if np.any(np.diff(grid) <= 0):
            raise DomainError("inspection times must be strictly increasing")
        for i in range(1, k):
            if self.change_points[i - 1] + self.delta >= self.inspection_times[i][0]:
                raise DomainError(
                    f"lag after change point {self.change_points[i - 1]} overruns the "
                    f"first inspection of level {i + 1}")

    @property
    def k(self) -> int:
        return len(self.stresses)

    @cached_property
    def x(self) -> np.ndarray:
        return np.asarray(self.stresses)

    @cached_property
    def change_points(self) -> np.ndarray:
        return np.array([level[-1] for level in self.inspection_times])

    @cached_property
    def grid(self) -> np.ndarray:
        return np.array([t for level in self.inspection_times for t in level])

    @cached_property
    def cell_level(self) -> np.ndarray:
        """Stress level (0-based) owning each failure cell."""
        return np.concatenate([np.full(len(level), i)
                               for i, level in enumerate(self.inspection_times)])

    @property
    def n_failure_cells(self) -> int:
        return len(self.grid)

    @property
    def n_cells(self) -> int:
        """Failure cells plus the survival cell."""
        return len(self.grid) + 1

    @property
    def n_params(self) -> int:
        return self.k + 2

    @property
    def termination(self) -> float:
        return float(self.change_points[-1])

    def cell_labels(self) -> list[str]:
        labels = [f"n{i + 1}{m + 1}" for i, level in enumerate(self.inspection_times)
                  for m in range(len(level))]
        return labels + ["ns"]

    def param_names(self) -> list[str]:
        return ["c0", "c1"] + [f"g{i + 1}" for i in range(self.k)]

    def scaled(self, factor: float) -> "TestPlan":
        """Same plan with the inspection times multiplied by ``factor``.

        The lag is a modelling constant rather than a clock reading and is kept.
        """
        return TestPlan(self.stresses,
                        [[t * factor for t in level] for level in self.inspection_times],
                        self.delta)

    def cell_of(self, t: float) -> int:
        """Index of the cell containing time ``t`` (survival cell is last)."""
        if not t > 0:
            raise DomainError("time must be positive")
        return int(np.searchsorted(self.grid, t, side="left"))


@dataclass(frozen=True)
class ParamVector:
    """Model parameters ``(c0, c1, gamma_1..gamma_k)``."""

    c0: float
    c1: float
    gammas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if not all(g > 0 for g in self.gammas):
            raise DomainError("shape parameters gamma must be positive")

    @classmethod
    def from_array(cls, theta) -> "ParamVector":
        theta = np.asarray(theta, dtype=float)
        return cls(float(theta[0]), float(theta[1]), tuple(theta[2:]))

    def to_array(self) -> np.ndarray:
        return np.array([self.c0, self.c1, *self.gammas])

    def __array__(self, dtype=None, copy=None):
        return self.to_array() if dtype is None else self.to_array().astype(dtype)

    def rates(self, plan: TestPlan) -> np.ndarray:
        return lambda_of_stress(self.c0, self.c1, plan.x)


@dataclass(frozen=True)
class CellProbs:
    """Theoretical probabilities of the failure cells and of survival."""

    failure: np.ndarray
    survival: float

    def as_array(self) -> np.ndarray:
        return np.append(self.failure, self.survival)

    def __array__(self, dtype=None, copy=None):
        out = self.as_array()
        return out if dtype is None else out.astype(dtype)


@dataclass(frozen=True)
class CountData:
    """Interval failure counts ``n_im`` (flattened by level) and survivors."""

    failures: np.ndarray
    survivors: int
    _n: int = field(init=False, repr=False)

    def __post_init__(self):
        failures = np.asarray(self.failures)
        if failures.ndim != 1 or np.any(failures < 0) or np.any(failures != np.round(failures)):
            raise DomainError("failure counts must be a flat vector of nonnegative integers")
        if self.survivors < 0 or int(self.survivors) != self.survivors:
            raise DomainError("survivor count must be a nonnegative integer")
        object.__setattr__(self, "failures", failures.astype(np.int64))
        object.__setattr__(self, "survivors", int(self.survivors))
        object.__setattr__(self, "_n", int(failures.sum()) + int(self.survivors))

    @classmethod
    def from_array(cls, counts) -> "CountData":
        counts = np.asarray(counts)
        return cls(counts[:-1], int(counts[-1]))

    @property
    def n(self) -> int:
        return self._n

    @property
    def n_failures(self) -> int:
        return int(self.failures.sum())

    def as_array(self) -> np.ndarray:
        return np.append(self.failures, self.survivors)

    def frequencies(self) -> np.ndarray:
        return self.as_array() / self.n

    def check_plan(self, plan: TestPlan):
        if len(self.failures) != plan.n_failure_cells:
            raise DomainError(
                f"{len(self.failures)} failure counts for a plan with "
                f"{plan.n_failure_cells} inspection intervals")


def lambda_of_stress(c0, c1, x):
    """Rate ``exp(c0 + c1 * x)`` of the log-linear stress link."""
    with np.errstate(over="ignore"):
        lam = np.exp(c0 + c1 * np.asarray(x, dtype=float))
    if not np.all(np.isfinite(lam)):
        raise DomainError("rate parameter overflowed; parameters out of numeric range")
    return lam if np.ndim(lam) else float(lam)


def _as_theta(plan: TestPlan, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (plan.n_params,):
        raise DomainError(f"expected {plan.n_params} parameters, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise DomainError("parameters must be finite")
    if np.any(theta[2:] <= 0):
        raise DomainError("shape parameters gamma must be positive")
    return theta


def _offsets(plan: TestPlan, dist: DistributionKind, lam, g, with_grad: bool):
    """Accumulated lag corrections O_i so that H(t) = lam_i Q(t; g_i) + O_i after the lag.

    Returns ``(O, dO)`` with shapes ``(k,)`` and ``(k, k+2)``.
    """
    k, d = plan.k, plan.delta
    x = plan.x
    offset = np.zeros(k)
    d_offset = np.zeros((k, k + 2)) if with_grad else None
    for i in range(1, k):
        a = plan.change_points[i - 1]
        b = a + d
        qa, qb = dist.q(a, g[i - 1]), dist.q(b, g[i])
        qpa, qpb = dist.dq_dt(a, g[i - 1]), dist.dq_dt(b, g[i])
        jump = (lam[i - 1] * qa - lam[i] * qb
                + 0.5 * d * (lam[i - 1] * qpa + lam[i] * qpb))
        offset[i] = offset[i - 1] + jump
        if with_grad:
            prev = lam[i - 1] * (qa + 0.5 * d * qpa)
            nxt = lam[i] * (0.5 * d * qpb - qb)
            row = d_offset[i - 1].copy()
            row[0] += prev + nxt
            row[1] += x[i - 1] * prev + x[i] * nxt
            row[2 + i - 1] += lam[i - 1] * (dist.dq_dg(a, g[i - 1])
                                            + 0.5 * d * dist.d2q_dtdg(a, g[i - 1]))
            row[2 + i] += lam[i] * (0.5 * d * dist.d2q_dtdg(b, g[i]) - dist.dq_dg(b, g[i]))
            d_offset[i] = row
    return offset, d_offset


def cumulative_hazard(plan: TestPlan, dist, theta, t, with_grad: bool = False):
    """Cumulative hazard H(t) of the step-stress model at times ``t``.

    With ``with_grad`` also returns dH/dtheta with shape ``(len(t), k+2)``.
    """
    dist = DistributionKind.parse(dist)
    theta = _as_theta(plan, theta)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(~(t > 0)):
        raise DomainError("time must be positive")
    lam = lambda_of_stress(theta[0], theta[1], plan.x)
    g = theta[2:]
    x, d, k = plan.x, plan.delta, plan.k
    offset, d_offset = _offsets(plan, dist, lam, g, with_grad)

    level = np.minimum(np.searchsorted(plan.change_points, t, side="left"), k - 1)
    H = np.empty_like(t)
    dH = np.zeros((len(t), k + 2)) if with_grad else None
    for i in range(k):
        on_level = level == i
        if not on_level.any():
            continue
        if i == 0:
            in_lag = np.zeros_like(on_level)
        else:
            in_lag = on_level & (t <= plan.change_points[i - 1] + d)
        post = on_level & ~in_lag
        if post.any():
            tp = t[post]
            q = dist.q(tp, g[i])
            H[post] = lam[i] * q + offset[i]
            if with_grad:
                dH[post] = d_offset[i]
                dH[post, 0] += lam[i] * q
                dH[post, 1] += x[i] * lam[i] * q
                dH[post, 2 + i] += lam[i] * dist.dq_dg(tp, g[i])
        if in_lag.any():
            a = plan.change_points[i - 1]
            u = t[in_lag] - a
            w = u * u / (2.0 * d)
            h_prev = lam[i - 1] * dist.dq_dt(a, g[i - 1])
            h_next = lam[i] * dist.dq_dt(a + d, g[i])
            base = lam[i - 1] * dist.q(a, g[i - 1]) + offset[i - 1]
            H[in_lag] = base + u * h_prev + w * (h_next - h_prev)
            if with_grad:
                rows = np.tile(d_offset[i - 1], (len(u), 1))
                base_c = lam[i - 1] * dist.q(a, g[i - 1])
                rows[:, 0] += base_c + (u - w) * h_prev + w * h_next
                rows[:, 1] += x[i - 1] * (base_c + (u - w) * h_prev) + x[i] * w * h_next
                rows[:, 2 + i - 1] += lam[i - 1] * (dist.dq_dg(a, g[i - 1])
                                                    + (u - w) * dist.d2q_dtdg(a, g[i - 1]))
                rows[:, 2 + i] += w * lam[i] * dist.d2q_dtdg(a + d, g[i])
                dH[in_lag] = rows
    if not np.all(np.isfinite(H)):
        raise DomainError("cumulative hazard is not finite; parameters out of numeric range")
    return (H, dH) if with_grad else H


def crm_hazard(plan: TestPlan, dist, theta, t):
    """Piecewise hazard: Lehman hazard per level, linear across each lag."""
    dist = DistributionKind.parse(dist)
    theta = _as_theta(plan, theta)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(~(t > 0)):
        raise DomainError("time must be positive")
    lam = lambda_of_stress(theta[0], theta[1], plan.x)
    g = theta[2:]
    k, d = plan.k, plan.delta
    level = np.minimum(np.searchsorted(plan.change_points, t, side="left"), k - 1)
    h = lam[level] * dist.dq_dt(t, g[level])
    for i in range(1, k):
        a = plan.change_points[i - 1]
        in_lag = (level == i) & (t <= a + d)
        if in_lag.any():
            h_prev = lam[i - 1] * dist.dq_dt(a, g[i - 1])
            h_next = lam[i] * dist.dq_dt(a + d, g[i])
            h[in_lag] = h_prev + (h_next - h_prev) * (t[in_lag] - a) / d
    return float(h[0]) if scalar else h


def crm_survival(plan: TestPlan, dist, theta, t):
    """Survival ``S(t) = exp(-H(t))`` under the cumulative risk model."""
    scalar = np.ndim(t) == 0
    s = np.exp(-cumulative_hazard(plan, dist, theta, t))
    return float(s[0]) if scalar else s


def _grid_hazard(plan: TestPlan, dist: DistributionKind, theta, with_grad: bool):
    # Inspection times never fall inside a lag (plan invariant), so every grid
    # point uses the post-lag branch.
    lam = lambda_of_stress(theta[0], theta[1], plan.x)
    g = theta[2:]
    lvl = plan.cell_level
    t = plan.grid
    offset, d_offset = _offsets(plan, dist, lam, g, with_grad)
    lq = lam[lvl] * dist.q(t, g[lvl])
    H = lq + offset[lvl]
    if not with_grad:
        return H, None
    dH = d_offset[lvl].copy()
    dH[:, 0] += lq
    dH[:, 1] += plan.x[lvl] * lq
    dH[np.arange(len(t)), 2 + lvl] += lam[lvl] * dist.dq_dg(t, g[lvl])
    return H, dH


def probs_and_jacobian(plan: TestPlan, dist, theta, with_grad: bool = True):
    """Cell probabilities as a flat vector and their Jacobian ``(cells+1, k+2)``.

    This is the fast internal entry point used by the estimators.
    """
    dist = DistributionKind.parse(dist)
    theta = _as_theta(plan, theta)
    with np.errstate(over="ignore", invalid="ignore"):
        H, dH = _grid_hazard(plan, dist, theta, with_grad)
    if not np.all(np.isfinite(H)) or (with_grad and not np.all(np.isfinite(dH))):
        raise DomainError("cumulative hazard is not finite; parameters out of numeric range")
    H_full = np.concatenate(([0.0], H))
    S = np.exp(-H_full)
    p = np.empty(len(H_full))
    # S(a) - S(b) written as S(a) * (1 - exp(-(H(b) - H(a)))) keeps small cells accurate
    p[:-1] = S[:-1] * -np.expm1(-np.diff(H_full))
    p[-1] = S[-1]
    if not with_grad:
        return p, None
    dS = -S[1:, None] * dH
    jac = np.empty((len(p), plan.n_params))
    jac[0] = -dS[0]
    jac[1:-1] = dS[:-1] - dS[1:]
    jac[-1] = dS[-1]
    return p, jac


def cell_probabilities(plan: TestPlan, dist, theta) -> CellProbs:
    """Multinomial cell probabilities ``(p_im, p_s)`` for the plan."""
    p, _ = probs_and_jacobian(plan, dist, theta, with_grad=False)
    if np.any(p <= 0):
        warnings.warn("a cell probability underflowed to zero", ProbabilityFloorWarning,
                      stacklevel=2)
    return CellProbs(p[:-1], float(p[-1]))


def cell_prob_gradient(plan: TestPlan, dist, theta) -> np.ndarray:
    """Jacobian of the cell probabilities, rows = cells (survival last), cols = theta."""
    return probs_and_jacobian(plan, dist, theta)[1]


def finite_difference_jacobian(plan: TestPlan, dist, theta, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the cell probabilities (self-check path)."""
    theta = _as_theta(plan, theta)
    cols = []
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = step * max(1.0, abs(theta[j]))
        hi, _ = probs_and_jacobian(plan, dist, theta + e, with_grad=False)
        lo, _ = probs_and_jacobian(plan, dist, theta - e, with_grad=False)
        cols.append((hi - lo) / (2 * e[j]))
    return np.column_stack(cols)


def check_gradient(plan: TestPlan, dist, theta, rtol: float = 1e-5, atol: float = 1e-9) -> float:
    """Compare the analytic Jacobian with finite differences.

    Returns the worst scaled discrepancy and raises ``AssertionError`` when it
    exceeds ``rtol``.
    """
    analytic = cell_prob_gradient(plan, dist, theta)
    numeric = finite_difference_jacobian(plan, dist, theta)
    err = np.abs(analytic - numeric) / (atol + rtol * np.abs(numeric))
    worst = float(np.max(err)) * rtol
    if worst > rtol:
        raise AssertionError(f"analytic Jacobian disagrees with finite differences "
                             f"(scaled error {worst:.3g})")
    return worst


def floor_probs(p: np.ndarray) -> np.ndarray:
    """Clamp probabilities to ``[PROB_FLOOR, 1]`` and warn if that changed anything."""
    if np.any(p < PROB_FLOOR) or np.any(p > 1):
        warnings.warn("cell probabilities clamped to the numeric floor",
                      ProbabilityFloorWarning, stacklevel=3)
        return np.clip(p, PROB_FLOOR, 1.0)
    return p
