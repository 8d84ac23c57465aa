"""Percentile bootstrap intervals by matched-pair or full-portfolio resampling."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
from joblib import Parallel, delayed

from .core import Portfolio, RateMatchError
from .matcher import MatchedSample

MIN_REPLICATES_FOR_CI = 100
MAX_FAILED_FRACTION = 0.2


class Scheme(str, enum.Enum):
    PAIR = "pair"
    FULL = "full"


@dataclass(frozen=True)
class BootstrapConfig:
    n_replicates: int = 1000
    ci_level: float = 0.95
    seed: int = 0
    scheme: Scheme = Scheme.PAIR

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not 0 < self.ci_level < 1:
            raise RateMatchError("ci_level must lie in (0, 1)")
        if self.n_replicates < 1:
            raise RateMatchError("n_replicates must be positive")


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    ci_low: float
    ci_high: float
    replicates: np.ndarray
    n_failed: int
    ci_level: float

    def replicates_to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["replicate", "value"])
            for i, v in enumerate(self.replicates):
                writer.writerow([i, repr(float(v))])


def resample_pairs(sample: MatchedSample, rng: np.random.Generator) -> MatchedSample:
    """Draw matched targets (with all their tied pairs) with replacement."""
    n = sample.n_matched
    return sample.take_clusters(rng.integers(0, n, size=n))


def resample_portfolio(portfolio: Portfolio, rng: np.random.Generator) -> Portfolio:
    """Case resampling within each year, keeping every year's size."""
    index = []
    for year in portfolio.year_values:
        pos = np.flatnonzero(portfolio.years == year)
        index.extend(pos[rng.integers(0, pos.size, size=pos.size)].tolist())
    return portfolio.select(index)


def percentile_interval(values: np.ndarray, level: float) -> tuple[float, float]:
    """Nearest-rank percentiles: the ceil(q * B)-th smallest replicate for q = a/2, 1 - a/2."""
    v = np.sort(np.asarray(values, dtype=float))
    B = v.size
    alpha = 1.0 - level

    def rank(q):
        return min(max(math.ceil(q * B - 1e-9), 1), B) - 1

    return float(v[rank(alpha / 2)]), float(v[rank(1 - alpha / 2)])


def _replicate(estimate_fn, resample, data, seed, indices):
    out = []
    for r in indices:
        rng = np.random.default_rng([seed, r])
        try:
            out.append(float(estimate_fn(resample(data, rng))))
        except (RateMatchError, ArithmeticError, np.linalg.LinAlgError):
            out.append(float("nan"))
    return out


def bootstrap_ci(estimate_fn: Callable[[Any], float], data: Any, cfg: BootstrapConfig,
                 workers: int = 1, resample: Callable | None = None) -> BootstrapResult:
    """Re-evaluate ``estimate_fn`` on resampled ``data`` and take percentile bounds.

    With the pair scheme ``data`` is a ``MatchedSample``; with the full scheme it is
    a ``Portfolio`` and ``estimate_fn`` is expected to refit and rematch. Replicate
    ``r`` draws from a generator seeded with ``(cfg.seed, r)``, so results do not
    depend on ``workers``.
    """
    if resample is None:
        if cfg.scheme is Scheme.PAIR:
            if not isinstance(data, MatchedSample):
                raise RateMatchError("pair resampling needs a matched sample")
            resample = resample_pairs
        else:
            if not isinstance(data, Portfolio):
                raise RateMatchError("full resampling needs a portfolio")
            resample = resample_portfolio
    if cfg.n_replicates < MIN_REPLICATES_FOR_CI:
        raise RateMatchError(f"need at least {MIN_REPLICATES_FOR_CI} replicates for an interval")
    point = float(estimate_fn(data))
    idx = list(range(cfg.n_replicates))
    if workers > 1:
        chunks = [idx[i::workers] for i in range(workers)]
        parts = Parallel(n_jobs=workers)(
            delayed(_replicate)(estimate_fn, resample, data, cfg.seed, c) for c in chunks)
        values = np.empty(cfg.n_replicates)
        for c, p in zip(chunks, parts):
            values[c] = p
    else:
        values = np.array(_replicate(estimate_fn, resample, data, cfg.seed, idx))
    failed = int(np.isnan(values).sum())
    if failed > MAX_FAILED_FRACTION * cfg.n_replicates:
        raise RateMatchError(f"{failed} of {cfg.n_replicates} bootstrap replicates failed")
    ok = values[~np.isnan(values)]
    low, high = percentile_interval(ok, cfg.ci_level)
    return BootstrapResult(point, low, high, values, failed, cfg.ci_level)
