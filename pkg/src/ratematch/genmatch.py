"""Genetic search over diagonal metric weights that maximises post-match balance."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .balance import BalanceData, balance_report
from .core import CovariateSpec, Portfolio, RateMatchError
from .distance import MetricContext, WeightMatrix
from .matcher import AllDroppedError, MatchOptions, match_portfolio

logger = logging.getLogger(__name__)

TOURNAMENT_SIZE = 3
CROSSOVER_RATE = 0.8
MUTATION_RATE = 0.2
MUTATION_SIGMA = 0.5


@dataclass(frozen=True)
class GaConfig:
    pop_size: int = 50
    max_generations: int = 20
    wait_generations: int = 5
    seed: int = 0
    lower: float = 0.0
    upper: float = 1000.0
    starting_values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.pop_size < 2:
            raise RateMatchError("pop_size must be at least 2")
        if self.max_generations < 1 or self.wait_generations < 1:
            raise RateMatchError("max_generations and wait_generations must be positive")
        if self.lower < 0 or not self.upper > self.lower:
            raise RateMatchError("weight bounds need 0 <= lower < upper")


@total_ordering
@dataclass(frozen=True)
class FitnessValue:
    """Ascending balance p-values, compared lexicographically (larger is better)."""

    p_values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "p_values", tuple(sorted(float(p) for p in self.p_values)))

    @property
    def min_p(self) -> float:
        return self.p_values[0] if self.p_values else 1.0

    def __lt__(self, other: "FitnessValue") -> bool:
        return self.p_values < other.p_values


@dataclass
class GaResult:
    weights: WeightMatrix
    fitness: FitnessValue
    history: list[tuple[int, FitnessValue, np.ndarray]] = field(default_factory=list)
    evaluations: int = 0

    def history_to_csv(self, path: str | Path, names: Sequence[str]) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["generation", "best_min_p", *names])
            for gen, fit, w in self.history:
                writer.writerow([gen, repr(fit.min_p), *(repr(float(x)) for x in w)])

    def weights_to_csv(self, path: str | Path, names: Sequence[str]) -> None:
        write_weights(self.weights, names, path)


def write_weights(w: WeightMatrix, names: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["covariate", "weight"])
        for n, x in zip(names, w.weights):
            writer.writerow([n, repr(float(x))])


def read_weights(path: str | Path, names: Sequence[str]) -> WeightMatrix:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        table = {r["covariate"]: float(r["weight"]) for r in csv.DictReader(fh)}
    missing = [n for n in names if n not in table]
    if missing:
        raise RateMatchError(f"weights file {path} lacks {', '.join(missing)}")
    return WeightMatrix(np.array([table[n] for n in names]))


def fitness(portfolio: Portfolio, ctx: MetricContext, specs: Sequence[CovariateSpec] | None,
            w: WeightMatrix, opts: MatchOptions, target_year: int | None = None,
            comparison_year: int | None = None, data: BalanceData | None = None) -> FitnessValue:
    """Sorted post-match p-values for the matching induced by ``w``."""
    try:
        sample = match_portfolio(portfolio, ctx, w, opts, target_year, comparison_year)
    except AllDroppedError:
        n = len(data.columns) if data is not None else sum(
            1 for s in (specs or portfolio.specs) if s.confounder)
        return FitnessValue((0.0,) * max(n, 1))
    report = balance_report(portfolio, sample, specs, data=data)
    return FitnessValue(tuple(r.p_value for r in report.rows))


def _evaluate(portfolio, ctx, data, opts, target_year, comparison_year, batch):
    # worker entry point: must stay a pure function of its arguments
    return [fitness(portfolio, ctx, None, WeightMatrix(w), opts, target_year,
                    comparison_year, data=data) for w in batch]


def _tournament(rng, fits: list[FitnessValue]) -> int:
    picks = rng.choice(len(fits), size=TOURNAMENT_SIZE, replace=True)
    best = picks[0]
    for p in picks[1:]:
        if fits[p] > fits[best]:
            best = p
    return int(best)


def _repair(x: np.ndarray, cfg: GaConfig, rng) -> np.ndarray:
    x = np.clip(x, cfg.lower, cfg.upper)
    if not np.any(x > 0):
        x[rng.integers(x.size)] = cfg.upper
    return x


def optimize(portfolio: Portfolio, ctx: MetricContext, specs: Sequence[CovariateSpec] | None,
             cfg: GaConfig, opts: MatchOptions = MatchOptions(), workers: int = 1,
             target_year: int | None = None, comparison_year: int | None = None) -> GaResult:
    """Evolve weight vectors; the best individual always survives (elitism of one).

    The first individual is ``cfg.starting_values`` (default all ones, i.e. plain
    Mahalanobis matching), the rest are uniform within the bounds. Stops after
    ``max_generations`` or ``wait_generations`` generations without improvement.
    """
    target_year, comparison_year = portfolio.default_years(target_year, comparison_year)
    specs = tuple(s for s in (specs or portfolio.specs) if s.confounder)
    data = BalanceData(portfolio, specs, target_year, comparison_year)
    rng = np.random.default_rng(cfg.seed)
    k = ctx.k
    start = np.ones(k) if cfg.starting_values is None else np.asarray(cfg.starting_values, float)
    if start.shape != (k,):
        raise RateMatchError(f"starting values need {k} entries")
    start = _repair(start.copy(), cfg, rng)
    pop = [start] + [_repair(rng.uniform(cfg.lower, cfg.upper, k), cfg, rng)
                     for _ in range(cfg.pop_size - 1)]

    cache: dict[bytes, FitnessValue] = {}
    evals = 0

    def evaluate(population):
        nonlocal evals
        todo = []
        for x in population:
            key = x.tobytes()
            if key not in cache and key not in {t.tobytes() for t in todo}:
                todo.append(x)
        if todo:
            args = (portfolio, ctx, data, opts, target_year, comparison_year)
            if workers > 1:
                batches = [todo[i::workers] for i in range(workers) if todo[i::workers]]
                parts = Parallel(n_jobs=workers)(delayed(_evaluate)(*args, b) for b in batches)
                by_key = {x.tobytes(): f for b, fs in zip(batches, parts) for x, f in zip(b, fs)}
                results = [by_key[x.tobytes()] for x in todo]
            else:
                results = _evaluate(*args, todo)
            for x, f in zip(todo, results):
                cache[x.tobytes()] = f
            evals += len(todo)
        return [cache[x.tobytes()] for x in population]

    fits = evaluate(pop)
    best_i = max(range(len(pop)), key=lambda i: (fits[i], -i))
    best_x, best_f = pop[best_i].copy(), fits[best_i]
    history = [(0, best_f, best_x.copy())]
    stale = 0
    for gen in range(1, cfg.max_generations):
        children = [best_x.copy()]
        while len(children) < cfg.pop_size:
            p1 = pop[_tournament(rng, fits)]
            p2 = pop[_tournament(rng, fits)]
            if rng.random() < CROSSOVER_RATE:
                mask = rng.random(k) < 0.5
                child = np.where(mask, p1, p2)
            else:
                child = p1.copy()
            mutate = rng.random(k) < MUTATION_RATE
            factors = np.exp(MUTATION_SIGMA * rng.standard_normal(k))
            fresh = rng.uniform(cfg.lower, cfg.upper, k)
            child = np.where(mutate, np.where(child > 0, child * factors, fresh), child)
            children.append(_repair(child, cfg, rng))
        pop = children
        fits = evaluate(pop)
        gen_best = max(range(len(pop)), key=lambda i: (fits[i], -i))
        if fits[gen_best] > best_f:
            best_x, best_f = pop[gen_best].copy(), fits[gen_best]
            stale = 0
        else:
            stale += 1
        history.append((gen, best_f, best_x.copy()))
        logger.info("generation %d: best min p %.4f", gen, best_f.min_p)
        if stale >= cfg.wait_generations:
            break
    return GaResult(WeightMatrix(best_x), best_f, history, evals)
