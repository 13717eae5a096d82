"""Robust pseudo-posteriors, Hamiltonian Monte Carlo, and posterior summaries.

The pseudo-posterior replaces the log-likelihood by ``n * B_alpha(theta)``,
the density power divergence "maximizer" scaled to the sample size, and adds a
data-based prior on the cell probabilities.  With ``alpha = 0`` the ordinary
log-likelihood is used instead, giving the usual Bayes estimator.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .model import PROB_FLOOR, CountData, DomainError, TestPlan

log = logging.getLogger(__name__)

# target(theta) -> (log density, gradient); log density may be -inf
Target = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class SamplerError(RuntimeError):
    """HMC could not produce usable draws."""


class PriorKind(enum.Enum):
    NORMAL = "normal"
    DIRICHLET = "dirichlet"
    FLAT = "flat"

    @classmethod
    def parse(cls, value) -> "PriorKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown prior kind {value!r}") from None


@dataclass(frozen=True)
class PriorSpec:
    """Which data-based prior to use and its settings.

    ``denominator`` picks how the smoothed empirical probabilities are
    normalised: ``"levels"`` divides by ``n + k * cells + 1``, ``"cells"`` by
    ``n + cells + 1`` (cells counts failure intervals only).
    """

    kind: PriorKind = PriorKind.NORMAL
    sigma2: float = 0.05
    denominator: str = "levels"

    def __post_init__(self):
        object.__setattr__(self, "kind", PriorKind.parse(self.kind))
        if not self.sigma2 > 0:
            raise ValueError("prior variance must be positive")
        if self.denominator not in ("levels", "cells"):
            raise ValueError("denominator must be 'levels' or 'cells'")

    def build(self, plan: TestPlan, counts: CountData) -> "DataPrior":
        counts.check_plan(plan)
        cells = plan.n_failure_cells
        extra = plan.k * cells if self.denominator == "levels" else cells
        p_tilde = (counts.as_array() + 1.0) / (counts.n + extra + 1.0)
        beta = None
        if self.kind is PriorKind.DIRICHLET:
            beta = dirichlet_hyperparameters(p_tilde, self.sigma2)
        return DataPrior(self.kind, p_tilde, beta, cells)


def dirichlet_hyperparameters(p_tilde: np.ndarray, sigma2: float) -> np.ndarray:
    """Match the survival-cell variance ``sigma2`` to get Dirichlet parameters.

    The total concentration ``T`` solves ``p_s (1 - p_s) / (T + 1) = sigma2``;
    failure cells get ``p_tilde * T`` and the survival cell the remainder.
    """
    p_s = p_tilde[-1]
    total = p_s * (1.0 - p_s) / sigma2 - 1.0
    beta = np.empty_like(p_tilde)
    beta[:-1] = p_tilde[:-1] * total
    beta[-1] = total - beta[:-1].sum()
    if not np.all(beta > 0):
        raise DomainError(
            f"prior variance {sigma2} gives non-positive Dirichlet parameters; lower it")
    return beta


@dataclass(frozen=True)
class DataPrior:
    """Prior on theta induced through the cell probabilities."""

    kind: PriorKind
    p_tilde: np.ndarray
    beta: np.ndarray | None
    n_failure_cells: int

    def log_density(self, p: np.ndarray) -> float:
        if self.kind is PriorKind.FLAT:
            return 0.0
        if self.kind is PriorKind.NORMAL:
            ss = float(np.sum((p[:-1] - self.p_tilde[:-1]) ** 2))
            if not ss > 0:
                return math.inf
            return -0.5 * self.n_failure_cells * math.log(ss)
        return float(np.sum((self.beta - 1.0) * np.log(p)))

    def dlog_dp(self, p: np.ndarray) -> np.ndarray:
        """Derivative of the log prior with respect to each cell probability."""
        out = np.zeros_like(p)
        if self.kind is PriorKind.NORMAL:
            resid = p[:-1] - self.p_tilde[:-1]
            out[:-1] = -self.n_failure_cells * resid / np.sum(resid ** 2)
        elif self.kind is PriorKind.DIRICHLET:
            out = (self.beta - 1.0) / p
        return out


def b_alpha(counts, probs, alpha: float) -> float:
    """Per-unit DPD score ``(1/a) sum f p^a - 1/(a+1) sum p^(a+1)``, survival included."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n = counts.as_array().astype(float) if isinstance(counts, CountData) \
        else np.asarray(counts, dtype=float)
    freq = n / n.sum()
    p = np.asarray(probs, dtype=float)
    return float(np.sum(freq * p ** alpha) / alpha - np.sum(p ** (alpha + 1)) / (alpha + 1))


class PseudoPosterior:
    """Unnormalised log pseudo-posterior ``n B_alpha(theta) + log prior`` with gradient.

    ``alpha = 0`` uses the multinomial log-likelihood in place of ``n B_alpha``.
    Points outside the parameter space, or where probabilities overflow,
    get log density ``-inf``.
    """

    def __init__(self, plan: TestPlan, dist, counts: CountData, alpha: float,
                 prior: DataPrior | PriorSpec | None = None,
                 frequencies: np.ndarray | None = None):
        counts.check_plan(plan)
        if not alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if isinstance(prior, PriorSpec):
            prior = prior.build(plan, counts)
        self.plan = plan
        self.alpha = float(alpha)
        self.prior = prior
        self.n = float(counts.n)
        self.freq = (counts.as_array() / counts.n if frequencies is None
                     else np.asarray(frequencies, dtype=float))
        self._args = _kernels.kernel_args(plan, dist)

    def _probs(self, theta, want_jac):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)) or np.any(theta[2:] <= 0):
            return None, None
        p, jac = _kernels.probs(self._args, theta, want_jac)
        if p is None or not np.all(np.isfinite(p)):
            return None, None
        return np.clip(p, PROB_FLOOR, 1.0), jac

    def data_term(self, p: np.ndarray) -> float:
        a = self.alpha
        if a == 0:
            used = self.freq > 0
            return float(self.n * np.sum(self.freq[used] * np.log(p[used])))
        return float(self.n * (np.sum(self.freq * p ** a) / a - np.sum(p ** (a + 1)) / (a + 1)))

    def _dterm_dp(self, p: np.ndarray) -> np.ndarray:
        a = self.alpha
        if a == 0:
            return self.n * self.freq / p
        return self.n * (self.freq * p ** (a - 1) - p ** a)

    def log_prob(self, theta) -> float:
        p, _ = self._probs(theta, False)
        if p is None:
            return -math.inf
        out = self.data_term(p)
        if self.prior is not None:
            out += self.prior.log_density(p)
        return out if math.isfinite(out) else -math.inf

    def __call__(self, theta) -> tuple[float, np.ndarray]:
        p, jac = self._probs(theta, True)
        if p is None:
            return -math.inf, np.full(self.plan.n_params, np.nan)
        value = self.data_term(p)
        dp = self._dterm_dp(p)
        if self.prior is not None:
            value += self.prior.log_density(p)
            dp = dp + self.prior.dlog_dp(p)
        if not math.isfinite(value):
            return -math.inf, np.full(self.plan.n_params, np.nan)
        return value, dp @ jac


def log_posterior(plan: TestPlan, dist, counts: CountData, theta, alpha: float,
                  prior: PriorSpec | DataPrior | None) -> float:
    """Unnormalised log pseudo-posterior at ``theta``."""
    return PseudoPosterior(plan, dist, counts, alpha, prior).log_prob(theta)


# ---------------------------------------------------------------- HMC

@dataclass(frozen=True)
class HmcConfig:
    """Sampler settings; the mass matrix is ``diag(1 / mass_diag)``."""

    step_size: float = 0.01
    n_leapfrog: int = 10
    mass_diag: tuple[float, ...] = ()
    chains: int = 2
    iterations: int = 1200
    burn_in: int = 200
    seed: int = 0
    jitter: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "mass_diag", tuple(float(v) for v in self.mass_diag))
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.n_leapfrog < 1 or self.chains < 1:
            raise ValueError("leapfrog steps and chain count must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn-in must be smaller than the number of iterations")
        if any(not v > 0 for v in self.mass_diag):
            raise ValueError("mass diagonal entries must be positive")

    def velocity_scale(self, dim: int) -> np.ndarray:
        if not self.mass_diag:
            return np.ones(dim)
        if len(self.mass_diag) != dim:
            raise ValueError(f"mass diagonal has {len(self.mass_diag)} entries, need {dim}")
        return np.asarray(self.mass_diag)


@dataclass
class PosteriorChains:
    """Post-burn-in draws with shape ``(chains, kept, dim)``."""

    draws: np.ndarray
    acceptance: np.ndarray
    nonfinite: np.ndarray
    alpha: float | None = None
    prior: str | None = None
    config: HmcConfig | None = field(default=None, repr=False)

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]


def leapfrog(grad_u: Callable[[np.ndarray], np.ndarray], theta, phi, step: float,
             n_steps: int, velocity_scale) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Hamilton's equations; ``grad_u`` is the gradient of the potential.

    Position moves by ``step * velocity_scale * phi`` (inverse mass times momentum).
    """
    theta = np.array(theta, dtype=float)
    phi = np.array(phi, dtype=float)
    v = np.asarray(velocity_scale, dtype=float)
    phi -= 0.5 * step * grad_u(theta)
    for i in range(n_steps):
        theta += step * v * phi
        g = grad_u(theta)
        phi -= (step if i < n_steps - 1 else 0.5 * step) * g
    return theta, phi


def _trajectory(target: Target, theta, logp, grad, phi, step, n_steps, v):
    phi = phi + 0.5 * step * grad
    for i in range(n_steps):
        theta = theta + step * v * phi
        logp, grad = target(theta)
        if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
            return None
        phi = phi + (step if i < n_steps - 1 else 0.5 * step) * grad
    return theta, logp, grad, -phi


def _run_chain(target: Target, start, config: HmcConfig, rng: np.random.Generator):
    dim = len(start)
    v = config.velocity_scale(dim)
    theta = np.array(start, dtype=float)
    logp, grad = target(theta)
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        raise SamplerError("log posterior is not finite at the chain's starting point")
    kept = np.empty((config.iterations - config.burn_in, dim))
    accepted = bad = 0
    momentum_sd = 1.0 / np.sqrt(v)
    for it in range(config.iterations):
        phi = rng.normal(0.0, momentum_sd)
        energy0 = -logp + 0.5 * np.sum(v * phi ** 2)
        proposal = _trajectory(target, theta, logp, grad, phi, config.step_size,
                               config.n_leapfrog, v)
        # draw the uniform regardless so streams stay aligned across outcomes
        u = rng.random()
        if proposal is None:
            bad += 1
        else:
            th_new, lp_new, g_new, phi_new = proposal
            energy1 = -lp_new + 0.5 * np.sum(v * phi_new ** 2)
            if u < math.exp(min(0.0, energy0 - energy1)):
                theta, logp, grad = th_new, lp_new, g_new
                accepted += 1
        if it >= config.burn_in:
            kept[it - config.burn_in] = theta
    if bad > 0.9 * config.iterations:
        raise SamplerError(f"{bad} of {config.iterations} proposals hit non-finite "
                           f"log posterior values; reduce the step size")
    return kept, accepted / config.iterations, bad


def hmc_sample(target: Target, config: HmcConfig, initial,
               starts: Sequence | None = None) -> PosteriorChains:
    """Run ``config.chains`` independent HMC chains.

    Chain 0 starts at ``initial``; the others at ``initial`` plus N(0, jitter^2)
    noise unless explicit ``starts`` are given.  Each chain draws from its own
    stream spawned from ``config.seed``.
    """
    initial = np.asarray(initial, dtype=float)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    draws, acc, bad = [], [], []
    for c, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        if starts is not None:
            start = np.asarray(starts[c], dtype=float)
        elif c == 0:
            start = initial
        else:
            start = initial + rng.normal(0.0, config.jitter, size=initial.shape)
            start[2:] = np.abs(start[2:])
        kept, rate, nbad = _run_chain(target, start, config, rng)
        log.debug("chain %d: acceptance %.3f, non-finite proposals %d", c, rate, nbad)
        draws.append(kept)
        acc.append(rate)
        bad.append(nbad)
    return PosteriorChains(np.stack(draws), np.array(acc), np.array(bad), config=config)


def rbe(chains: PosteriorChains) -> np.ndarray:
    """Posterior mean over every kept draw of every chain."""
    if chains.n_draws == 0:
        raise ValueError("no draws")
    return chains.flat.mean(axis=0)


def hpd_interval(chains: PosteriorChains | np.ndarray, index: int | None = None,
                 level: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``ceil(level * M)`` of the ``M`` marginal draws."""
    if isinstance(chains, PosteriorChains):
        x = chains.flat[:, index]
    else:
        x = np.asarray(chains, dtype=float).ravel() if index is None \
            else np.asarray(chains)[..., index].ravel()
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    x = np.sort(x)
    m = len(x)
    if m == 0:
        raise ValueError("no draws")
    width = math.ceil(level * m)
    spans = x[width - 1:] - x[:m - width + 1]
    i = int(np.argmin(spans))
    return float(x[i]), float(x[i + width - 1])


def sample_posterior(plan: TestPlan, dist, counts: CountData, alpha: float,
                     prior: PriorSpec | None, config: HmcConfig, initial) -> PosteriorChains:
    """Build the pseudo-posterior and sample it from ``initial``."""
    target = PseudoPosterior(plan, dist, counts, alpha, prior)
    chains = hmc_sample(target, config, initial)
    chains.alpha = float(alpha)
    chains.prior = prior.kind.value if prior is not None else "flat"
    return chains


def sample_prior(plan: TestPlan, dist, counts: CountData, prior: PriorSpec,
                 config: HmcConfig, initial) -> PosteriorChains:
    """Draw theta from the data-based prior alone (no likelihood term) by HMC."""
    built = prior.build(plan, counts)
    args = _kernels.kernel_args(plan, dist)
    dim = plan.n_params

    def target(theta):
        if np.any(theta[2:] <= 0) or not np.all(np.isfinite(theta)):
            return -math.inf, np.full(dim, np.nan)
        p, jac = _kernels.probs(args, theta)
        if p is None:
            return -math.inf, np.full(dim, np.nan)
        p = np.clip(p, PROB_FLOOR, 1.0)
        value = built.log_density(p)
        if not math.isfinite(value):
            return -math.inf, np.full(dim, np.nan)
        return value, built.dlog_dp(p) @ jac

    chains = hmc_sample(target, config, initial)
    chains.prior = prior.kind.value
    return chains
