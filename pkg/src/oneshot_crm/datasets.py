"""Plain-text dataset files.

Two layouts are accepted.  Raw failure times, one per line::

    n: 64
    12.07
    19.5
    ...

or counts keyed by the right end of each inspection interval::

    n: 64
    32: 13
    64: 12
    ...

``n`` (or ``survivors``) declares the number of devices; units not listed as
failures are survivors.  Lines starting with ``#`` are comments.  Times are
in raw units and multiplied by the time scale before binning.
"""
from __future__ import annotations

import os
from importlib import resources
from pathlib import Path

import numpy as np

from .model import CountData, DomainError, TestPlan


class DatasetError(ValueError):
    """A dataset file is malformed or inconsistent with the plan."""


def bundled_path(name: str) -> Path:
    """Path of a file shipped in the package's data directory."""
    return Path(str(resources.files("oneshot_crm") / "data" / name))


def parse_dataset(text: str) -> tuple[list[float], dict[float, int], int | None, int | None]:
    """Split a dataset into (raw times, binned counts, n, survivors)."""
    times, binned = [], {}
    n = survivors = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if ":" in line:
                key, value = (part.strip() for part in line.split(":", 1))
                if key.lower() == "n":
                    n = int(value)
                elif key.lower() == "survivors":
                    survivors = int(value)
                else:
                    binned[float(key)] = int(value)
            else:
                times.extend(float(tok) for tok in line.replace(",", " ").split())
        except ValueError:
            raise DatasetError(f"line {lineno}: cannot parse {raw!r}") from None
    if times and binned:
        raise DatasetError("a dataset holds either raw times or binned counts, not both")
    return times, binned, n, survivors


def bin_times(times, plan: TestPlan) -> np.ndarray:
    """Failure counts per inspection interval ``(tau_prev, tau]``."""
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0):
        raise DatasetError("failure times must be positive")
    if np.any(times > plan.termination):
        worst = float(times.max())
        raise DatasetError(f"failure time {worst:g} is after the end of the test "
                           f"({plan.termination:g}); record it as a survivor")
    idx = np.searchsorted(plan.grid, times, side="left")
    return np.bincount(idx, minlength=plan.n_failure_cells)[:plan.n_failure_cells]


def counts_from_parts(failures, n: int | None, survivors: int | None) -> CountData:
    failures = np.asarray(failures, dtype=np.int64)
    total_failed = int(failures.sum())
    if n is None and survivors is None:
        raise DatasetError("declare the number of devices ('n:') or survivors ('survivors:')")
    if survivors is None:
        survivors = n - total_failed
    if n is not None and n != total_failed + survivors:
        raise DatasetError(f"declared n={n} but {total_failed} failures and {survivors} survivors")
    if survivors < 0:
        raise DatasetError(f"{total_failed} failures exceed the declared n={n}")
    try:
        return CountData(failures, survivors)
    except DomainError as exc:
        raise DatasetError(str(exc)) from exc


def load_dataset(path: str | os.PathLike, plan: TestPlan, time_scale: float = 1.0) -> CountData:
    """Read a dataset file and bin it against the (already scaled) plan."""
    text = Path(path).read_text()
    times, binned, n, survivors = parse_dataset(text)
    if binned:
        failures = np.zeros(plan.n_failure_cells, dtype=np.int64)
        for key, count in binned.items():
            hit = np.flatnonzero(np.isclose(plan.grid, key * time_scale))
            if len(hit) != 1:
                raise DatasetError(f"interval key {key:g} is not an inspection time of the plan")
            failures[hit[0]] += count
    else:
        failures = bin_times(np.asarray(times) * time_scale, plan)
    return counts_from_parts(failures, n, survivors)
