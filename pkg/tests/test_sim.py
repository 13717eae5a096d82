import csv
import io
from dataclasses import dataclass

import numpy as np
import pytest

from oneshot_crm.bayes import HmcConfig, PriorKind, PriorSpec
from oneshot_crm.classical import FitConfig, FitError
from oneshot_crm.model import cell_probabilities
from oneshot_crm.sim import (METRIC_COLUMNS, BayesEstimator, ClassicalEstimator, Estimate,
                             SimScenario, SimulationError, bootstrap_bias_rmse, generate_counts,
                             generate_mixture_counts, mixture_probs, run_study, summarize)

from conftest import WEIBULL_CONTAM, WEIBULL_TRUE


@dataclass(frozen=True)
class FixedEstimator:
    """Returns a fixed point with a fixed interval half-width."""
    value: tuple
    half_width: float = 0.1
    name: str = "fixed"
    alpha: float = 0.0

    def __call__(self, plan, dist, counts, start, seed=None):
        theta = np.asarray(self.value, dtype=float)
        return Estimate(theta, np.column_stack([theta - self.half_width, theta + self.half_width]))


@dataclass(frozen=True)
class FailingEstimator:
    name: str = "broken"
    alpha: float = 0.0

    def __call__(self, plan, dist, counts, start, seed=None):
        raise FitError("always fails")


@dataclass(frozen=True)
class CellCountEstimator:
    """Reads the first cell count into every coordinate, to expose the data stream."""
    name: str = "count"
    alpha: float = 0.0

    def __call__(self, plan, dist, counts, start, seed=None):
        return Estimate(np.full(plan.n_params, float(counts.failures[0])))


class TestDataGeneration:
    def test_counts_sum_to_n(self, sim_plan):
        counts = generate_counts(sim_plan, "weibull", WEIBULL_TRUE, 100, np.random.default_rng(0))
        assert counts.n == 100 and len(counts.failures) == 9

    def test_cell_means_within_binomial_error(self, sim_plan):
        rng = np.random.default_rng(1)
        p = cell_probabilities(sim_plan, "weibull", WEIBULL_TRUE).as_array()
        reps = 4000
        total = sum(generate_counts(sim_plan, "weibull", WEIBULL_TRUE, 100, rng).as_array()
                    for _ in range(reps))
        se = np.sqrt(100 * p * (1 - p) / reps)
        assert np.all(np.abs(total / reps - 100 * p) < 4.5 * se)

    def test_mixture_probabilities(self):
        out = mixture_probs(np.array([0.2, 0.3, 0.5]), 0.1, 1)
        np.testing.assert_allclose(out, [0.18, 0.37, 0.45])
        assert out.sum() == pytest.approx(1.0)

    def test_full_contamination(self, sim_plan):
        counts = generate_mixture_counts(sim_plan, "weibull", WEIBULL_TRUE, 50, 1.0, 3,
                                         np.random.default_rng(0))
        assert counts.failures[3] == 50

    def test_scenario(self, sim_plan):
        pure = SimScenario(sim_plan, "weibull", WEIBULL_TRUE)
        dirty = SimScenario(sim_plan, "weibull", WEIBULL_TRUE, WEIBULL_CONTAM)
        np.testing.assert_array_equal(pure.generating_theta, WEIBULL_TRUE)
        np.testing.assert_array_equal(dirty.generating_theta, WEIBULL_CONTAM)
        with pytest.raises(ValueError):
            SimScenario(sim_plan, "weibull", WEIBULL_TRUE, n=0)


class TestSummaries:
    def test_exact_estimator(self, sim_plan):
        table = run_study(SimScenario(sim_plan, "weibull", WEIBULL_TRUE, reps=5),
                          [FixedEstimator(tuple(WEIBULL_TRUE))])
        for name in sim_plan.param_names():
            row = table.get("fixed", 0.0, name)
            assert (row.mab, row.mse, row.cp, row.reps) == (0.0, 0.0, 100.0, 5)
            assert row.aw == pytest.approx(0.2)

    def test_offset_estimator(self, sim_plan):
        offset = WEIBULL_TRUE + 0.3
        table = run_study(SimScenario(sim_plan, "weibull", WEIBULL_TRUE, reps=3),
                          [FixedEstimator(tuple(offset))])
        row = table.get("fixed", 0.0, "g2")
        assert row.mab == pytest.approx(0.3) and row.mse == pytest.approx(0.09) and row.cp == 0.0

    def test_summarize_skips_failures(self):
        rows = summarize([Estimate(np.array([1.0])), None, Estimate(np.array([3.0]))],
                         np.array([2.0]), ["c0"], "x", 0.0)
        assert rows[0].mab == 1.0 and rows[0].reps == 2 and rows[0].failures == 1
        assert np.isnan(rows[0].cp)

    def test_abort_on_failures(self, sim_plan):
        with pytest.raises(SimulationError):
            run_study(SimScenario(sim_plan, "weibull", WEIBULL_TRUE, reps=3), [FailingEstimator()])

    def test_deterministic_and_worker_independent(self, sim_plan):
        scenario = SimScenario(sim_plan, "weibull", WEIBULL_TRUE, reps=6, seed=12)
        a = run_study(scenario, [CellCountEstimator()])
        b = run_study(scenario, [CellCountEstimator()])
        c = run_study(scenario, [CellCountEstimator()], workers=2)
        assert a.rows == b.rows == c.rows
        other = run_study(SimScenario(sim_plan, "weibull", WEIBULL_TRUE, reps=6, seed=13),
                          [CellCountEstimator()])
        assert other.rows != a.rows

    def test_csv_columns(self, sim_plan, tmp_path):
        table = run_study(SimScenario(sim_plan, "weibull", WEIBULL_TRUE, reps=2),
                          [FixedEstimator(tuple(WEIBULL_TRUE))])
        text = table.to_csv(tmp_path / "m.csv")
        rows = list(csv.reader(io.StringIO(text)))
        assert tuple(rows[0]) == METRIC_COLUMNS
        assert len(rows) == 1 + 5
        assert (tmp_path / "m.csv").read_text() == text


class TestEstimators:
    def test_names(self):
        assert ClassicalEstimator(0.0).name == "MLE"
        assert ClassicalEstimator(0.4).name == "MDPDE"
        prior = PriorSpec(PriorKind.NORMAL)
        assert BayesEstimator(0.0, prior, HmcConfig()).name == "BE-normal"
        assert BayesEstimator(0.5, prior, HmcConfig()).name == "RBE-normal"

    def test_classical_estimate_has_intervals(self, sim_plan):
        counts = generate_counts(sim_plan, "weibull", WEIBULL_TRUE, 100, np.random.default_rng(2))
        est = ClassicalEstimator(0.5, FitConfig(max_iters=500))(sim_plan, "weibull", counts,
                                                                 WEIBULL_TRUE)
        assert est.theta.shape == (5,) and est.ci.shape == (5, 2)
        assert np.all(est.ci[:, 0] <= est.theta) and np.all(est.theta <= est.ci[:, 1])

    def test_bayes_estimate_is_seeded(self, sim_plan):
        counts = generate_counts(sim_plan, "weibull", WEIBULL_TRUE, 100, np.random.default_rng(2))
        est = BayesEstimator(0.5, PriorSpec(PriorKind.NORMAL),
                             HmcConfig(step_size=0.002, chains=1, iterations=30, burn_in=10),
                             FitConfig(max_iters=100))
        seed = np.random.SeedSequence(4)
        a = est(sim_plan, "weibull", counts, WEIBULL_TRUE, seed)
        b = est(sim_plan, "weibull", counts, WEIBULL_TRUE, seed)
        np.testing.assert_array_equal(a.theta, b.theta)


class TestBootstrap:
    def test_constant_estimator(self, sim_plan):
        counts = generate_counts(sim_plan, "weibull", WEIBULL_TRUE, 100, np.random.default_rng(0))
        theta_hat, bias, rmse = bootstrap_bias_rmse(sim_plan, "weibull", counts,
                                                    FixedEstimator(tuple(WEIBULL_TRUE)), 100, 0,
                                                    WEIBULL_TRUE)
        np.testing.assert_array_equal(theta_hat, WEIBULL_TRUE)
        np.testing.assert_array_equal(bias, 0.0)
        np.testing.assert_array_equal(rmse, 0.0)

    def test_needs_replicates(self, sim_plan):
        counts = generate_counts(sim_plan, "weibull", WEIBULL_TRUE, 100, np.random.default_rng(0))
        with pytest.raises(ValueError):
            bootstrap_bias_rmse(sim_plan, "weibull", counts, FixedEstimator(tuple(WEIBULL_TRUE)),
                                10, 0, WEIBULL_TRUE)
