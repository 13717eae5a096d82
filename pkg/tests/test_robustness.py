import numpy as np
import pytest
from scipy.optimize import fsolve

from oneshot_crm.bayes import PosteriorChains
from oneshot_crm.model import CountData, DomainError, TestPlan, probs_and_jacobian
from oneshot_crm.robustness import (InsufficientSampleError, gross_error_sensitivity,
                                    if_bayes_factor, if_bayes_factor_samples, if_mdpde,
                                    if_mdpde_table, if_rbe, resolve_cell, x_alpha)
from oneshot_crm.testing import HypothesisSpec

from conftest import GOMPERTZ_TRUE, WEIBULL_TRUE

# two levels, two inspections each: five cells, four parameters
TOY_PLAN = TestPlan([1.0, 2.0], [[1.0, 2.0], [3.0, 4.0]], 0.01)
TOY_THETA = np.array([-1.0, 0.3, 1.2, 0.8])
SIM_COUNTS = CountData([8, 9, 7, 10, 6, 12, 5, 9, 6], 28)


def mdpde_functional(freq, alpha, start):
    """Root of the MDPDE estimating equation for cell frequencies ``freq``."""
    def equation(theta):
        p, jac = probs_and_jacobian(TOY_PLAN, "weibull", theta)
        return (p ** alpha - freq * p ** (alpha - 1)) @ jac
    return fsolve(equation, start, xtol=1e-12)


def score_b(p_model, freq, alpha):
    return np.sum(freq * p_model ** alpha, axis=-1) / alpha - np.sum(p_model ** (alpha + 1), axis=-1) / (alpha + 1)


class TestResolveCell:
    def test_time_and_index(self, sim_plan):
        assert resolve_cell(sim_plan, t=2.5) == 2
        assert resolve_cell(sim_plan, cell=9) == 9
        assert resolve_cell(sim_plan, t=100.0) == 9

    def test_bad_arguments(self, sim_plan):
        with pytest.raises(ValueError):
            resolve_cell(sim_plan)
        with pytest.raises(ValueError):
            resolve_cell(sim_plan, t=1.0, cell=1)
        with pytest.raises(DomainError):
            resolve_cell(sim_plan, cell=10)


class TestMdpdeInfluence:
    def test_constant_within_cell(self, sim_plan):
        a = if_mdpde(sim_plan, "weibull", WEIBULL_TRUE, 0.5, t=3.2)
        b = if_mdpde(sim_plan, "weibull", WEIBULL_TRUE, 0.5, t=3.9)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.8])
    def test_zero_mean_under_model(self, sim_plan, alpha):
        table = if_mdpde_table(sim_plan, "gompertz", GOMPERTZ_TRUE, alpha)
        p, _ = probs_and_jacobian(sim_plan, "gompertz", GOMPERTZ_TRUE)
        np.testing.assert_allclose(p @ table, 0.0, atol=1e-8 * np.abs(table).max())

    @pytest.mark.parametrize("alpha,cell", [(0.0, 0), (0.5, 1), (0.5, 4), (1.0, 3)])
    def test_matches_finite_contamination(self, alpha, cell):
        p0, _ = probs_and_jacobian(TOY_PLAN, "weibull", TOY_THETA)
        delta = np.eye(5)[cell]
        eps = 1e-5
        plus = mdpde_functional((1 - eps) * p0 + eps * delta, alpha, TOY_THETA)
        minus = mdpde_functional((1 + eps) * p0 - eps * delta, alpha, TOY_THETA)
        numeric = (plus - minus) / (2 * eps)
        analytic = if_mdpde(TOY_PLAN, "weibull", TOY_THETA, alpha, cell=cell)
        np.testing.assert_allclose(analytic, numeric, rtol=0.01, atol=1e-4 * np.abs(analytic).max())

    def test_gross_error_sensitivity(self):
        table = np.array([[3.0, 4.0], [1.0, 0.0], [0.0, -6.0]])
        assert gross_error_sensitivity(table) == (6.0, 2)


class TestXAlpha:
    def test_zero_when_reference_is_indicator(self):
        p = np.array([0.2, 0.3, 0.5])
        assert x_alpha(p, np.array([0.0, 1.0, 0.0]), 1, 0.5)[0] == 0.0

    def test_value(self):
        p = np.array([0.25, 0.25, 0.5])
        f = np.array([0.5, 0.25, 0.25])
        expected = ((1 - 0.5) * 0.5 - 0.25 * 0.5 - 0.25 * 0.5 ** 0.5) / 0.5
        assert x_alpha(p, f, 0, 0.5)[0] == pytest.approx(expected)

    def test_log_form(self):
        p = np.array([0.25, 0.25, 0.5])
        f = np.array([0.5, 0.25, 0.25])
        expected = (1 - 0.5) * np.log(0.25) - 0.25 * np.log(0.25) - 0.25 * np.log(0.5)
        assert x_alpha(p, f, 0, 0.0)[0] == pytest.approx(expected)


class TestRbeInfluence:
    def test_constant_draws_have_no_influence(self, sim_plan):
        draws = np.tile(WEIBULL_TRUE, (300, 1))
        np.testing.assert_allclose(if_rbe(sim_plan, "weibull", SIM_COUNTS, 0.5, draws, cell=0), 0.0,
                                   atol=1e-12)

    def test_two_atoms(self, sim_plan):
        a, b = WEIBULL_TRUE, WEIBULL_TRUE + np.array([0.05, -0.02, 0.01, 0.02, 0.03])
        draws = np.array([a, b] * 150)
        freq = SIM_COUNTS.frequencies()
        pa, _ = probs_and_jacobian(sim_plan, "weibull", a)
        pb, _ = probs_and_jacobian(sim_plan, "weibull", b)
        delta = np.eye(10)[4]
        xa = np.sum((delta - freq) * pa ** 0.5) / 0.5
        xb = np.sum((delta - freq) * pb ** 0.5) / 0.5
        expected = 100 * 0.25 * (a - b) * (xa - xb)
        got = if_rbe(sim_plan, "weibull", SIM_COUNTS, 0.5, draws, t=4.5)
        np.testing.assert_allclose(got, expected, rtol=1e-10)

    def test_per_draw_reference(self, sim_plan):
        draws = np.array([WEIBULL_TRUE, WEIBULL_TRUE * 1.01] * 150)
        chains = PosteriorChains(draws[None], np.ones(1), np.zeros(1))
        emp = if_rbe(sim_plan, "weibull", SIM_COUNTS, 0.5, chains, cell=2)
        own = if_rbe(sim_plan, "weibull", SIM_COUNTS, 0.5, chains, cell=2, reference="per_draw")
        assert emp.shape == own.shape == (5,)
        assert not np.allclose(emp, own)
        with pytest.raises(ValueError):
            if_rbe(sim_plan, "weibull", SIM_COUNTS, 0.5, chains, cell=2, reference="model")

    def test_too_few_draws(self, sim_plan):
        with pytest.raises(InsufficientSampleError):
            if_rbe(sim_plan, "weibull", SIM_COUNTS, 0.5, np.tile(WEIBULL_TRUE, (10, 1)), cell=0)


class TestBayesFactorInfluence:
    def prior_cloud(self, size=400, spread=0.02, seed=0):
        rng = np.random.default_rng(seed)
        draws = TOY_THETA + rng.normal(0, spread, size=(size, 4))
        draws[:, 2:] = np.abs(draws[:, 2:])
        return draws

    def test_same_regions_give_zero(self):
        draws = self.prior_cloud()
        res = if_bayes_factor_samples(TOY_PLAN, "weibull", 0.5, TOY_THETA, 50, draws, draws, cell=1)
        assert res.value == pytest.approx(0.0, abs=1e-12)
        assert res.y_ratio == pytest.approx(1.0)

    def test_matches_finite_contamination(self):
        draws = self.prior_cloud()
        hyp = HypothesisSpec(TOY_THETA, 0.03)
        inside = hyp.inside(draws)
        n, alpha, cell = 50, 0.5, 2
        p0, _ = probs_and_jacobian(TOY_PLAN, "weibull", TOY_THETA)
        p_draws = np.array([probs_and_jacobian(TOY_PLAN, "weibull", th, with_grad=False)[0]
                            for th in draws])

        def mass_ratio(eps):
            freq = (1 - eps) * p0 + eps * np.eye(5)[cell]
            w = np.exp(n * score_b(p_draws, freq, alpha))
            return w[inside].mean() / w[~inside].mean()

        eps = 1e-6
        numeric = (mass_ratio(eps) - mass_ratio(-eps)) / (2 * eps)
        res = if_bayes_factor(TOY_PLAN, "weibull", alpha, hyp, n, draws, cell=cell)
        assert res.value == pytest.approx(numeric, rel=1e-5)
        assert abs(res.value) <= res.bound

    def test_bound_holds_for_every_cell(self):
        draws = self.prior_cloud(spread=0.05, seed=3)
        hyp = HypothesisSpec(TOY_THETA, 0.08)
        for cell in range(5):
            res = if_bayes_factor(TOY_PLAN, "weibull", 0.3, hyp, 30, draws, cell=cell)
            assert abs(res.value) <= res.bound

    def test_low_effective_sample_size(self):
        draws = self.prior_cloud(spread=1.0, seed=1)
        with pytest.raises(InsufficientSampleError):
            if_bayes_factor_samples(TOY_PLAN, "weibull", 0.5, TOY_THETA, 5000, draws, draws, cell=0)

    def test_empty_region(self):
        with pytest.raises(InsufficientSampleError):
            if_bayes_factor_samples(TOY_PLAN, "weibull", 0.5, TOY_THETA, 50, np.empty((0, 4)),
                                    self.prior_cloud(), cell=0)

    def test_requires_positive_alpha(self):
        with pytest.raises(ValueError):
            if_bayes_factor_samples(TOY_PLAN, "weibull", 0.0, TOY_THETA, 50, self.prior_cloud(),
                                    self.prior_cloud(), cell=0)
