"""End-to-end pieces shared by the CLI and the bootstrap: fit, match, estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Contrast, MatchMode, Portfolio, RateChangeEstimate, RateMatchError, TOTAL
from .distance import MetricContext, WeightMatrix, build_context
from .estimator import (Link, MultiYearResult, estimate_ipw, estimate_matched, estimate_multi_year,
                        estimate_naive, fit_premium_regression, ipw_means, regression_rate_change)
from .matcher import MatchedSample, MatchOptions, Mode, match_portfolio
from .propensity import PropensityModel, fit_logistic, propensity_scores, with_linear_predictor


@dataclass(frozen=True)
class MatchPlan:
    opts: MatchOptions = MatchOptions()
    use_propensity: bool = True
    ridge: float = 0.0
    # diagonal metric weights (None: plain Mahalanobis)
    weights: tuple[float, ...] | None = None
    pscore_caliper: float | None = None


@dataclass(frozen=True)
class MatchRun:
    portfolio: Portfolio
    sample: MatchedSample
    model: PropensityModel | None
    ctx: MetricContext | None


def prepare(portfolio: Portfolio, plan: MatchPlan, target_year: int | None = None,
            comparison_year: int | None = None):
    """Restrict to two years, append the propensity linear predictor, build the metric."""
    target_year, comparison_year = portfolio.default_years(target_year, comparison_year)
    pf = portfolio.select_years([target_year, comparison_year])
    model = None
    if plan.use_propensity or plan.opts.mode is Mode.PROPENSITY:
        model = fit_logistic(pf, None, target_year, comparison_year, ridge=plan.ridge)
        pf = with_linear_predictor(pf, model, plan.opts.propensity_column, plan.pscore_caliper)
    ctx = None
    if plan.opts.mode is Mode.CLASSIC and any(s.match_mode is MatchMode.APPROXIMATE for s in pf.specs):
        ctx = build_context(pf)
    return pf, model, ctx, target_year, comparison_year


def run_match(portfolio: Portfolio, plan: MatchPlan, target_year: int | None = None,
              comparison_year: int | None = None) -> MatchRun:
    pf, model, ctx, target_year, comparison_year = prepare(portfolio, plan, target_year, comparison_year)
    w = None
    if ctx is not None and plan.weights is not None:
        w = WeightMatrix(np.asarray(plan.weights, dtype=float))
    sample = match_portfolio(pf, ctx, w, plan.opts, target_year, comparison_year)
    return MatchRun(pf, sample, model, ctx)


def matched_portfolio(sample: MatchedSample, portfolio: Portfolio) -> tuple[Portfolio, np.ndarray]:
    """Matched policies as a portfolio plus their weights, for regression within the sample."""
    index = np.concatenate([sample.target_index, sample.comparison_index])
    weights = np.concatenate([sample.weight, sample.weight])
    return portfolio.select(index.tolist()), weights


# module-level estimate functions so they pickle into bootstrap workers

def pair_point(sample: MatchedSample, portfolio: Portfolio, coverage: str, contrast: Contrast) -> float:
    return estimate_matched(sample, portfolio, coverage, contrast).point


def rematch_point(portfolio: Portfolio, plan: MatchPlan, coverage: str, contrast: Contrast,
                  target_year: int, comparison_year: int) -> float:
    run = run_match(portfolio, plan, target_year, comparison_year)
    return estimate_matched(run.sample, run.portfolio, coverage, contrast).point


def naive_point(portfolio: Portfolio, coverage: str, contrast: Contrast,
                target_year: int, comparison_year: int) -> float:
    return estimate_naive(portfolio, coverage, contrast, target_year, comparison_year).point


def regression_point(portfolio: Portfolio, link: Link, coverage: str, contrast: Contrast,
                     target_year: int, comparison_year: int) -> float:
    fit = fit_premium_regression(portfolio, None, link, coverage, target_year, comparison_year)
    return regression_rate_change(fit, contrast, coverage).point


def ipw_point(portfolio: Portfolio, coverage: str, contrast: Contrast, target_year: int,
              comparison_year: int, ridge: float = 0.0) -> float:
    model = fit_logistic(portfolio, None, target_year, comparison_year, ridge=ridge)
    return estimate_ipw(portfolio, model, coverage, contrast, target_year).point


def multi_year(portfolio: Portfolio, target_year: int, method: str,
               contrast: Contrast = Contrast.RATIO, coverage: str = TOTAL,
               plan: MatchPlan = MatchPlan(), link: Link = Link.LOG) -> MultiYearResult:
    """Consecutive-year rate changes for ``target_year``'s mix by one method.

    ``matched`` matches the target portfolio into every other year once and compares
    the per-target matched means over targets matched in both years of a step;
    ``ipw`` reweights each year towards the target mix; ``naive`` and ``regression``
    are plain pairwise estimates.
    """
    contrast = Contrast(contrast)
    n_target = int((portfolio.years == target_year).sum())
    cache: dict[int, object] = {}

    def matched_means(year: int) -> dict[str, float]:
        if year not in cache:
            if year == target_year:
                mask = portfolio.years == target_year
                cache[year] = dict(zip(portfolio.ids[mask].tolist(), portfolio.premium(coverage)[mask]))
            else:
                run = run_match(portfolio, plan, target_year, year)
                s = run.sample
                prem = run.portfolio.premium(coverage)
                per = np.bincount(s.cluster, weights=s.weight * prem[s.comparison_index])
                first = np.searchsorted(s.cluster, np.arange(s.n_matched))
                cache[year] = dict(zip(s.target_ids[first].tolist(), per.tolist()))
        return cache[year]

    def ipw_mean(year: int) -> float:
        if year not in cache:
            if year == target_year:
                cache[year] = float(portfolio.premium(coverage)[portfolio.years == year].mean())
            else:
                pf = portfolio.select_years([target_year, year])
                model = fit_logistic(pf, None, target_year, year, ridge=plan.ridge)
                _, earlier, _ = ipw_means(pf, propensity_scores(model, pf), coverage, contrast,
                                          target_year, year)
                cache[year] = earlier
        return cache[year]

    def pairwise(pf: Portfolio, later: int, earlier: int) -> RateChangeEstimate:
        if method == "naive":
            return estimate_naive(pf, coverage, contrast, later, earlier)
        if method == "regression":
            fit = fit_premium_regression(pf, None, link, coverage, later, earlier)
            return regression_rate_change(fit, contrast, coverage)
        if method == "ipw":
            point = contrast.apply(ipw_mean(later), ipw_mean(earlier))
            return RateChangeEstimate("ipw", target_year, contrast, coverage, point,
                                      n_matched=n_target)
        if method == "matched":
            ml, me = matched_means(later), matched_means(earlier)
            common = [i for i in ml if i in me]
            if not common:
                raise RateMatchError("no target policy matched in both years")
            point = contrast.apply(float(np.mean([ml[i] for i in common])),
                                   float(np.mean([me[i] for i in common])))
            return RateChangeEstimate("matched", target_year, contrast, coverage, point,
                                      n_matched=len(common), n_dropped=n_target - len(common))
        raise RateMatchError(f"unknown multi-year method {method!r}")

    for year in portfolio.year_values:
        if not np.any(portfolio.years == year):
            raise RateMatchError(f"year {year} has no policies")
    return estimate_multi_year(portfolio, target_year, pairwise, contrast)
