"""Influence functions of the MDPDE, the robust Bayes estimator and the Bayes factor.

All three depend on the contamination point ``t`` only through the
inspection cell containing it, so every function accepts either a time or a
cell index (survival cell last).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .bayes import PosteriorChains
from .classical import SingularMatrixError, j_matrix
from .model import CountData, DomainError, TestPlan, floor_probs, probs_and_jacobian
from .testing import HypothesisSpec

MIN_DRAWS = 200
MIN_ESS = 50.0


class InsufficientSampleError(RuntimeError):
    """Too few (effective) Monte Carlo draws for a stable estimate."""


def resolve_cell(plan: TestPlan, t: float | None = None, cell: int | None = None) -> int:
    """Cell index for a contamination time ``t`` or a validated explicit index."""
    if (t is None) == (cell is None):
        raise ValueError("give exactly one of t or cell")
    if cell is not None:
        if not 0 <= cell < plan.n_cells:
            raise DomainError(f"cell index {cell} outside 0..{plan.n_cells - 1}")
        return int(cell)
    return plan.cell_of(float(t))


def _indicator(n_cells: int, cell: int) -> np.ndarray:
    out = np.zeros(n_cells)
    out[cell] = 1.0
    return out


def if_mdpde(plan: TestPlan, dist, theta, alpha: float, t: float | None = None,
             cell: int | None = None) -> np.ndarray:
    """``J^-1 sum_cells (Delta_cell - p) p^(alpha-1) grad p`` for a point mass at ``t``."""
    c = resolve_cell(plan, t, cell)
    return if_mdpde_table(plan, dist, theta, alpha)[c]


def if_mdpde_table(plan: TestPlan, dist, theta, alpha: float) -> np.ndarray:
    """MDPDE influence for every cell at once, shape ``(cells, k+2)``."""
    p, jac = probs_and_jacobian(plan, dist, theta)
    p = floor_probs(p)
    j = j_matrix(plan, dist, theta, alpha)
    cond = np.linalg.cond(j)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError("J matrix is singular", float(cond))
    score = jac * (p ** (alpha - 1))[:, None]          # row r: p_r^(a-1) grad p_r
    centered = score - (p @ score)                      # subtract sum_r p_r * row_r
    return np.linalg.solve(j, centered.T).T


def gross_error_sensitivity(table: np.ndarray) -> tuple[float, int]:
    """Largest Euclidean norm of the influence over the cells, and where it occurs."""
    norms = np.linalg.norm(np.atleast_2d(table), axis=-1)
    i = int(np.argmax(norms))
    return float(norms[i]), i


def x_alpha(probs: np.ndarray, reference: np.ndarray, cell: int, alpha: float) -> np.ndarray:
    """Derivative of the per-unit DPD score under contamination of ``reference`` at ``cell``.

    ``probs`` may hold one probability vector or one per row.  With
    ``alpha = 0`` the log-likelihood analogue ``sum (Delta - f) ln p`` is used.
    """
    probs = np.atleast_2d(probs)
    reference = np.broadcast_to(reference, probs.shape)
    delta = _indicator(probs.shape[1], cell)
    if alpha == 0:
        return np.sum((delta - reference) * np.log(probs), axis=1)
    return np.sum((delta - reference) * probs ** alpha, axis=1) / alpha


def _draw_probs(plan: TestPlan, dist, draws: np.ndarray) -> np.ndarray:
    return np.array([floor_probs(probs_and_jacobian(plan, dist, th, with_grad=False)[0])
                     for th in draws])


def if_rbe(plan: TestPlan, dist, counts: CountData, alpha: float,
           chains: PosteriorChains | np.ndarray, t: float | None = None,
           cell: int | None = None, reference: str = "empirical") -> np.ndarray:
    """``n * Cov_post(theta, X_alpha(theta; t))`` from pseudo-posterior draws.

    ``reference`` names the distribution being contaminated: ``"empirical"``
    uses the observed cell frequencies, ``"per_draw"`` the model probabilities
    at each draw.
    """
    c = resolve_cell(plan, t, cell)
    draws = chains.flat if isinstance(chains, PosteriorChains) else np.asarray(chains)
    if len(draws) < MIN_DRAWS:
        raise InsufficientSampleError(f"need at least {MIN_DRAWS} posterior draws")
    p = _draw_probs(plan, dist, draws)
    if reference == "empirical":
        ref = counts.frequencies()
    elif reference == "per_draw":
        ref = p
    else:
        raise ValueError("reference must be 'empirical' or 'per_draw'")
    x = x_alpha(p, ref, c, alpha)
    return counts.n * _cov(draws, x)


def _cov(draws: np.ndarray, x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    if weights is None:
        weights = np.full(len(x), 1.0 / len(x))
    mean_t = weights @ draws
    mean_x = weights @ x
    return weights @ ((draws - mean_t) * (x - mean_x)[:, None])


@dataclass(frozen=True)
class BfInfluence:
    value: float
    y_ratio: float
    e_null: float
    e_alt: float
    ess_null: float
    ess_alt: float
    bound: float


def _self_normalised(log_w: np.ndarray) -> tuple[np.ndarray, float]:
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    return w, 1.0 / float(np.sum(w ** 2))


def if_bayes_factor_samples(plan: TestPlan, dist, alpha: float, theta0, n: int,
                            null_draws: np.ndarray, alt_draws: np.ndarray,
                            t: float | None = None, cell: int | None = None) -> BfInfluence:
    """Bayes-factor influence from prior draws already split by hypothesis.

    The data are taken to follow the model at ``theta0``.  Each region's draws
    are reweighted by ``exp(n * B_alpha)`` (self-normalised), and the result is
    ``n * Y * (E_null[X] - E_alt[X])`` with ``Y`` the ratio of mean weights.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    c = resolve_cell(plan, t, cell)
    p0 = probs_and_jacobian(plan, dist, theta0, with_grad=False)[0]
    parts = []
    for draws in (null_draws, alt_draws):
        draws = np.atleast_2d(draws)
        if draws.shape[0] == 0 or draws.size == 0:
            raise InsufficientSampleError("a hypothesis region holds no draws")
        p = _draw_probs(plan, dist, draws)
        b = np.sum(p0 * p ** alpha, axis=1) / alpha - np.sum(p ** (alpha + 1), axis=1) / (alpha + 1)
        log_w = n * b
        w, ess = _self_normalised(log_w)
        if ess < MIN_ESS:
            raise InsufficientSampleError(
                f"effective sample size {ess:.1f} below {MIN_ESS:.0f} in a hypothesis region")
        log_mean = float(logsumexp(log_w) - math.log(len(log_w)))
        parts.append((log_mean, float(w @ x_alpha(p, p0, c, alpha)), ess,
                      float(np.max(p ** alpha))))
    (lm0, e0, ess0, m0), (lm1, e1, ess1, m1) = parts
    y = math.exp(lm0 - lm1)
    value = n * y * (e0 - e1)
    bound = n * y * 2.0 * max(m0, m1) / alpha
    return BfInfluence(value, y, e0, e1, ess0, ess1, bound)


def if_bayes_factor(plan: TestPlan, dist, alpha: float, hyp: HypothesisSpec, n: int,
                    prior_draws: np.ndarray, t: float | None = None,
                    cell: int | None = None) -> BfInfluence:
    """Bayes-factor influence with prior draws split by the ball around ``theta0``."""
    prior_draws = np.asarray(prior_draws, dtype=float)
    mask = hyp.inside(prior_draws)
    return if_bayes_factor_samples(plan, dist, alpha, hyp.theta0, n, prior_draws[mask],
                                   prior_draws[~mask], t=t, cell=cell)
