import math

import numpy as np
import pytest
from scipy.integrate import quad

from oneshot_crm.model import CountData, TestPlan

SIM_STRESSES = [1.5, 2.5, 3.5]
SIM_INSPECTIONS = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
WEIBULL_TRUE = np.array([0.03, -0.08, 0.1, 0.2, 0.3])
WEIBULL_CONTAM = np.array([0.033, -0.077, 0.099, 0.18, 0.299])
GOMPERTZ_TRUE = np.array([0.8, -0.1, 0.1, 0.2, 0.2])
GOMPERTZ_CONTAM = np.array([0.7, -0.098, 0.102, 0.17, 0.19])

BULB_INSPECTIONS = [[32, 64, 96], [111, 126, 140]]
BULB_COUNTS = [13, 12, 9, 6, 8, 5]
BULB_SURVIVORS = 11
BULB_WEIBULL_START = np.array([-0.9, -0.06, 0.2, 0.7])
BULB_GOMPERTZ_START = np.array([0.03, 0.22, 0.08, 0.07])


def bulb_plan(scale: float) -> TestPlan:
    return TestPlan([2.25, 2.44], [[t * scale for t in lvl] for lvl in BULB_INSPECTIONS], 0.001)


@pytest.fixture(scope="session")
def sim_plan():
    return TestPlan(SIM_STRESSES, SIM_INSPECTIONS, 0.001)


@pytest.fixture(scope="session")
def bulb_counts():
    return CountData(BULB_COUNTS, BULB_SURVIVORS)


@pytest.fixture(scope="session")
def bulb_weibull_plan():
    return bulb_plan(0.2)


@pytest.fixture(scope="session")
def bulb_gompertz_plan():
    return bulb_plan(0.1)


def random_instance(rng: np.random.Generator):
    """A random valid (plan, distribution, theta) with 1-4 levels."""
    k = int(rng.integers(1, 5))
    stresses = np.sort(rng.uniform(0.5, 4.0, size=k))
    levels, t = [], 0.0
    delta = float(rng.uniform(1e-4, 0.05))
    for i in range(k):
        q = int(rng.integers(1, 4))
        gap0 = delta * 1.5 if i > 0 else 0.0
        pts = t + gap0 + np.cumsum(rng.uniform(0.2, 1.5, size=q))
        levels.append(pts.tolist())
        t = pts[-1]
    plan = TestPlan(stresses, levels, delta)
    dist = "weibull" if rng.random() < 0.5 else "gompertz"
    if dist == "weibull":
        gam = rng.uniform(0.3, 2.5, size=k)
        c = [rng.uniform(-2.5, 0.5), rng.uniform(-0.4, 0.6)]
    else:
        gam = rng.uniform(0.05, 0.6, size=k)
        c = [rng.uniform(-3.0, 0.0), rng.uniform(-0.3, 0.5)]
    return plan, dist, np.array([*c, *gam])


def oracle_hazard(plan, dist, theta, t):
    """Piecewise hazard written out independently; lag lines from a 2x2 solve."""
    q_prime = {"weibull": lambda s, g: g * s ** (g - 1), "gompertz": lambda s, g: g * math.exp(g * s)}[dist]
    lam = [math.exp(theta[0] + theta[1] * x) for x in plan.stresses]
    g = theta[2:]
    taus = [lvl[-1] for lvl in plan.inspection_times]
    for i in range(plan.k):
        upper = taus[i] if i < plan.k - 1 else math.inf
        if t <= upper:
            if i > 0 and t <= taus[i - 1] + plan.delta:
                a0 = taus[i - 1]
                ends = [lam[i - 1] * q_prime(a0, g[i - 1]), lam[i] * q_prime(a0 + plan.delta, g[i])]
                a, b = np.linalg.solve([[1.0, a0], [1.0, a0 + plan.delta]], ends)
                return a + b * t
            return lam[i] * q_prime(t, g[i])
    raise AssertionError("unreachable")


def oracle_survival(plan, dist, theta, t):
    breaks = sorted({0.0, t} | {b for tau in plan.change_points[:-1]
                                for b in (tau, tau + plan.delta) if b < t})
    total = sum(quad(lambda s: oracle_hazard(plan, dist, theta, s), lo, hi,
                     epsabs=1e-14, epsrel=1e-13, limit=200)[0]
                for lo, hi in zip(breaks[:-1], breaks[1:]))
    return math.exp(-total)


def oracle_grid_survival(plan, dist, theta):
    """Survival at every inspection time, integrating the oracle hazard piece by piece."""
    lag_edges = {b for tau in plan.change_points[:-1] for b in (tau, tau + plan.delta)}
    knots = sorted({0.0} | lag_edges | set(plan.grid.tolist()))
    total, at = 0.0, {}
    for lo, hi in zip(knots[:-1], knots[1:]):
        total += quad(lambda s: oracle_hazard(plan, dist, theta, s), lo, hi,
                      epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        at[hi] = total
    return np.exp(-np.array([at[t] for t in plan.grid.tolist()]))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
