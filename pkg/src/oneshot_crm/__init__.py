"""Robust classical and Bayesian inference for one-shot devices under step-stress testing."""
from .model import (CellProbs, CountData, DistributionKind, DomainError, ParamVector, TestPlan,
                    cell_prob_gradient, cell_probabilities, crm_hazard, crm_survival,
                    lambda_of_stress)
from .classical import FitConfig, FitError, FitResult, fit, sandwich_covariance, select_tuning
from .bayes import (HmcConfig, PosteriorChains, PriorKind, PriorSpec, hmc_sample, hpd_interval,
                    log_posterior, rbe)
from .testing import BfResult, HypothesisSpec, bayes_factor_empirical, gof_bootstrap, interpret_bf

__version__ = "0.1.0"
