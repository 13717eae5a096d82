"""Run configuration: a YAML document with fixed sections and strict keys.

Sections are ``plan``, ``model``, ``data``, ``classical``, ``bayes``, ``test``
and ``sim``.  Unknown keys anywhere are an error, and ``dump`` followed by
``load`` reproduces the same configuration.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .bayes import HmcConfig, PriorKind, PriorSpec
from .classical import FitConfig
from .model import DistributionKind, DomainError, TestPlan


class ConfigError(ValueError):
    """The run configuration is malformed or inconsistent."""


def _default_grid() -> list[float]:
    return [round(0.1 + 0.05 * i, 2) for i in range(19)]


@dataclass
class PlanSection:
    stresses: list[float]
    inspection_times: list[list[float]]
    delta: float
    time_scale: float = 1.0
    change_points: list[float] | None = None

    def build(self) -> TestPlan:
        if not self.time_scale > 0:
            raise ConfigError("plan.time_scale must be positive")
        plan = TestPlan(self.stresses, self.inspection_times, self.delta)
        if self.change_points is not None and not np.allclose(self.change_points,
                                                             plan.change_points):
            raise ConfigError("plan.change_points must equal the last inspection of each level")
        return plan.scaled(self.time_scale) if self.time_scale != 1.0 else plan


@dataclass
class ModelSection:
    distribution: str

    def kind(self) -> DistributionKind:
        return DistributionKind.parse(self.distribution)


@dataclass
class DataSection:
    file: str | None = None
    failures: list[int] | None = None
    survivors: int | None = None
    n: int | None = None


@dataclass
class ClassicalSection:
    alphas: list[float] = field(default_factory=lambda: [0.0])
    grid: list[float] = field(default_factory=_default_grid)
    learning_rate: float = 1e-3
    threshold: float = 1e-6
    max_iters: int = 50_000
    initial: list[float] | None = None
    c1: float = 0.5
    c2: float = 0.5

    def fit_config(self, alpha: float = 0.0) -> FitConfig:
        return FitConfig(alpha, self.learning_rate, self.threshold, self.max_iters)


@dataclass
class BayesSection:
    prior: str = "normal"
    sigma2: float = 0.05
    denominator: str = "levels"
    alphas: list[float] = field(default_factory=lambda: [0.0])
    step_size: float = 0.01
    n_leapfrog: int = 10
    mass_diag: list[float] | None = None
    chains: int = 2
    iterations: int = 1200
    burn_in: int = 200
    seed: int = 0

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(PriorKind.parse(self.prior), self.sigma2, self.denominator)

    def hmc_config(self, dim: int) -> HmcConfig:
        mass = tuple(self.mass_diag) if self.mass_diag is not None else (1.0,) * dim
        return HmcConfig(self.step_size, self.n_leapfrog, mass, self.chains, self.iterations,
                         self.burn_in, self.seed)


@dataclass
class TestSection:
    __test__ = False  # not a pytest class

    theta0: list[float] | None = None
    eps_ball: float | None = None
    rho0: float = 0.5
    prior_odds: str | float = "sample"
    B: int = 1000
    seed: int = 0


@dataclass
class SimSection:
    theta_true: list[float] | None = None
    theta_contam: list[float] | None = None
    n: int = 100
    reps: int = 200
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.8])
    bayes_alphas: list[float] = field(default_factory=list)
    seed: int = 0
    workers: int = 1


_SECTIONS = {
    "plan": PlanSection, "model": ModelSection, "data": DataSection,
    "classical": ClassicalSection, "bayes": BayesSection, "test": TestSection,
    "sim": SimSection,
}
_REQUIRED = ("plan", "model")


@dataclass
class RunConfig:
    plan: PlanSection
    model: ModelSection
    data: DataSection = field(default_factory=DataSection)
    classical: ClassicalSection = field(default_factory=ClassicalSection)
    bayes: BayesSection = field(default_factory=BayesSection)
    test: TestSection = field(default_factory=TestSection)
    sim: SimSection = field(default_factory=SimSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    # -------------------------------------------------------------- io
    @classmethod
    def from_dict(cls, doc: Any, base_dir: Path | str = ".") -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping of sections")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
        for name in _REQUIRED:
            if name not in doc:
                raise ConfigError(f"missing required section '{name}'")
        sections = {name: _build_section(name, _SECTIONS[name], doc.get(name))
                    for name in _SECTIONS if name in doc}
        cfg = cls(**sections, base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def dump(self, path: str | os.PathLike | None = None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)
        if path is not None:
            Path(path).write_text(text)
        return text

    # -------------------------------------------------------------- checks
    def validate(self):
        try:
            plan = self.plan.build()
            self.model.kind()
            self.bayes.prior_spec()
            self.classical.fit_config()
        except (DomainError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        dim = plan.n_params
        for name, vec in (("classical.initial", self.classical.initial),
                          ("test.theta0", self.test.theta0),
                          ("sim.theta_true", self.sim.theta_true),
                          ("sim.theta_contam", self.sim.theta_contam),
                          ("bayes.mass_diag", self.bayes.mass_diag)):
            if vec is not None and len(vec) != dim:
                raise ConfigError(f"{name} needs {dim} entries, got {len(vec)}")
        try:
            self.bayes.hmc_config(dim)
        except ValueError as exc:
            raise ConfigError(f"bayes: {exc}") from exc
        if any(a < 0 for a in self.classical.alphas + self.bayes.alphas + self.sim.alphas):
            raise ConfigError("alpha values must be nonnegative")
        if not (isinstance(self.test.prior_odds, (int, float))
                or self.test.prior_odds in ("sample", "rho0")):
            raise ConfigError("test.prior_odds must be a number, 'sample' or 'rho0'")
        if self.data.file is not None:
            if self.data.failures is not None:
                raise ConfigError("give either data.file or inline data.failures, not both")
            if not self.data_path().is_file():
                raise ConfigError(f"data file {self.data_path()} does not exist")

    def data_path(self) -> Path:
        p = Path(self.data.file)
        return p if p.is_absolute() else self.base_dir / p

    def test_plan(self) -> TestPlan:
        return self.plan.build()

    def initial(self) -> np.ndarray:
        """Starting point for the optimizers (default: zero link, unit shapes)."""
        if self.classical.initial is not None:
            return np.asarray(self.classical.initial, dtype=float)
        return np.array([0.0, 0.0] + [1.0] * len(self.plan.stresses))


def _build_section(name: str, cls, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc
