"""Rate-change estimators: matched sample, naive, premium regression, IPW, multi-year chains."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Contrast, CovariateSpec, Portfolio, RateChangeEstimate, RateMatchError, TOTAL
from .design import Term, build_terms, check_rank, design_matrix
from .matcher import MatchedSample
from .propensity import PropensityModel, propensity_scores


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"


@dataclass(frozen=True)
class RegressionFit:
    link: Link
    terms: tuple[Term, ...]
    coefficients: np.ndarray
    residual_variance: float
    target_year: int
    comparison_year: int
    n_target: int

    @property
    def year_coefficient(self) -> float:
        return float(self.coefficients[-1])


def _ratio_mask(contrast: Contrast, *premiums: np.ndarray) -> np.ndarray:
    keep = np.ones(premiums[0].shape, dtype=bool)
    if contrast is Contrast.RATIO:
        for p in premiums:
            keep &= p > 0
    return keep


def estimate_matched(sample: MatchedSample, portfolio: Portfolio, coverage: str = TOTAL,
                     contrast: Contrast = Contrast.RATIO, method: str = "matched") -> RateChangeEstimate:
    """Target-year mean against the tie-weighted comparison mean of the matched sample.

    Under a ratio contrast, pairs with a zero premium on either side are excluded
    and counted in ``n_excluded``.
    """
    contrast = Contrast(contrast)
    if sample.weight.size == 0:
        raise RateMatchError("empty matched sample")
    prem = portfolio.premium(coverage)
    pt = prem[sample.target_index]
    pc = prem[sample.comparison_index]
    keep = _ratio_mask(contrast, pt, pc)
    w = sample.weight[keep]
    if w.size == 0:
        raise RateMatchError(f"no usable pairs for coverage {coverage!r} (all premiums zero)")
    later = float(np.sum(w * pt[keep]) / w.sum())
    earlier = float(np.sum(w * pc[keep]) / w.sum())
    if contrast is Contrast.RATIO and earlier <= 0:
        raise RateMatchError(f"zero comparison-year premium for coverage {coverage!r}")
    excluded = int(np.unique(sample.cluster[~keep]).size) if not keep.all() else 0
    return RateChangeEstimate(method, sample.target_year, contrast, coverage,
                              contrast.apply(later, earlier), n_matched=sample.n_matched,
                              n_dropped=len(sample.dropped), n_excluded=excluded)


def estimate_naive(portfolio: Portfolio, coverage: str = TOTAL, contrast: Contrast = Contrast.RATIO,
                   target_year: int | None = None, comparison_year: int | None = None) -> RateChangeEstimate:
    """Unadjusted contrast of the two years' mean premiums."""
    contrast = Contrast(contrast)
    target_year, comparison_year = portfolio.default_years(target_year, comparison_year)
    prem = portfolio.premium(coverage)
    t = portfolio.years == target_year
    c = portfolio.years == comparison_year
    keep = _ratio_mask(contrast, prem)
    if not np.any(t & keep) or not np.any(c & keep):
        raise RateMatchError(f"zero premium for coverage {coverage!r} in one of the years")
    later = float(prem[t & keep].mean())
    earlier = float(prem[c & keep].mean())
    return RateChangeEstimate("naive", target_year, contrast, coverage, contrast.apply(later, earlier),
                              n_matched=int(t.sum()), n_dropped=0,
                              n_excluded=int((t & ~keep).sum() + (c & ~keep).sum()))


def fit_premium_regression(portfolio: Portfolio, specs: Sequence[CovariateSpec] | None = None,
                           link: Link = Link.LOG, coverage: str = TOTAL,
                           target_year: int | None = None, comparison_year: int | None = None,
                           weights: np.ndarray | None = None) -> RegressionFit:
    """Least squares of h(premium) on intercept, additive covariates and a year dummy.

    The year dummy is the last column (1 for the target year). ``weights`` gives a
    weighted fit, e.g. tie weights when regressing within a matched sample.
    """
    link = Link(link)
    target_year, comparison_year = portfolio.default_years(target_year, comparison_year)
    pf = portfolio.select_years([target_year, comparison_year])
    if weights is not None and len(pf) != len(portfolio):
        raise RateMatchError("weights need a portfolio restricted to the two years")
    specs = tuple(s for s in (specs or pf.specs) if s.confounder)
    y = pf.premium(coverage)
    if link is Link.LOG:
        if np.any(y <= 0):
            raise RateMatchError(f"log link needs strictly positive {coverage!r} premiums")
        y = np.log(y)
    terms = build_terms(pf, specs) + [Term(f"year[{target_year}]")]
    X = design_matrix(pf, terms[:-1])
    X = np.column_stack([X, (pf.years == target_year).astype(float)])
    check_rank(X, terms)
    sw = np.ones(len(pf)) if weights is None else np.sqrt(np.asarray(weights, dtype=float))
    beta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ beta
    dof = max(len(pf) - X.shape[1], 1)
    sigma2 = float(np.sum(sw ** 2 * resid ** 2) / dof)
    return RegressionFit(link, tuple(terms), beta, sigma2, target_year, comparison_year,
                         int((pf.years == target_year).sum()))


def regression_rate_change(fit: RegressionFit, contrast: Contrast = Contrast.RATIO,
                           coverage: str = TOTAL) -> RateChangeEstimate:
    """Year effect as a rate change: identity/difference or log/ratio only."""
    contrast = Contrast(contrast)
    if fit.link is Link.IDENTITY and contrast is Contrast.DIFFERENCE:
        point = fit.year_coefficient
    elif fit.link is Link.LOG and contrast is Contrast.RATIO:
        point = (np.exp(fit.year_coefficient) - 1.0) * 100.0
    else:
        raise RateMatchError(
            f"{fit.link.value} link with {contrast.value} contrast gives a rate change that "
            "depends on the policy characteristics")
    return RateChangeEstimate("regression", fit.target_year, contrast, coverage, float(point),
                              n_matched=fit.n_target, n_dropped=0)


def ipw_means(portfolio: Portfolio, scores: np.ndarray, coverage: str, contrast: Contrast,
              target_year: int, comparison_year: int) -> tuple[float, float, int]:
    if np.any(scores <= 0) or np.any(scores >= 1):
        raise RateMatchError("propensity scores must lie strictly inside (0, 1)")
    prem = portfolio.premium(coverage)
    t = portfolio.years == target_year
    c = portfolio.years == comparison_year
    keep = _ratio_mask(contrast, prem)
    w = scores / (1.0 - scores)
    tk, ck = t & keep, c & keep
    if not tk.any() or not ck.any():
        raise RateMatchError(f"zero premium for coverage {coverage!r} in one of the years")
    later = float(prem[tk].mean())
    earlier = float(np.sum(w[ck] * prem[ck]) / np.sum(w[ck]))
    return later, earlier, int((t & ~keep).sum() + (c & ~keep).sum())


def estimate_ipw(portfolio: Portfolio, model: PropensityModel, coverage: str = TOTAL,
                 contrast: Contrast = Contrast.RATIO, target_year: int | None = None) -> RateChangeEstimate:
    """Target-year mix by weighting comparison policies with p / (1 - p).

    ``p`` is the fitted probability of the target year; target policies weigh 1.
    """
    contrast = Contrast(contrast)
    if target_year is None:
        target_year = model.target_year
    if target_year != model.target_year:
        raise RateMatchError("propensity model was fitted for a different target year")
    pf = portfolio.select_years([model.target_year, model.comparison_year])
    scores = propensity_scores(model, pf)
    later, earlier, excluded = ipw_means(pf, scores, coverage, contrast, model.target_year,
                                         model.comparison_year)
    return RateChangeEstimate("ipw", target_year, contrast, coverage, contrast.apply(later, earlier),
                              n_matched=int((pf.years == target_year).sum()), n_dropped=0,
                              n_excluded=excluded)


@dataclass(frozen=True)
class MultiYearResult:
    target_year: int
    steps: tuple[tuple[int, int, RateChangeEstimate], ...]
    chained: float
    contrast: Contrast

    def to_rows(self) -> list[dict]:
        rows = [{"from_year": a, "to_year": b, "point": e.point, "n_matched": e.n_matched,
                 "n_dropped": e.n_dropped} for a, b, e in self.steps]
        rows.append({"from_year": self.steps[0][0], "to_year": self.steps[-1][1],
                     "point": self.chained, "n_matched": "", "n_dropped": ""})
        return rows


def estimate_multi_year(portfolio: Portfolio, target_year: int,
                        pairwise: Callable[[Portfolio, int, int], RateChangeEstimate],
                        contrast: Contrast = Contrast.RATIO) -> MultiYearResult:
    """Consecutive-pair rate changes for the target year's mix, plus their chain.

    ``pairwise(portfolio, later, earlier)`` estimates the change from ``earlier``
    to ``later`` holding ``target_year``'s mix fixed; see ``anchored_pairwise``.
    """
    contrast = Contrast(contrast)
    years = portfolio.year_values
    if len(years) < 2:
        raise RateMatchError("need at least two years")
    if target_year not in years:
        raise RateMatchError(f"target year {target_year} has no policies")
    steps = []
    for earlier, later in zip(years, years[1:]):
        try:
            est = pairwise(portfolio, later, earlier)
        except RateMatchError as exc:
            raise RateMatchError(f"years {earlier}->{later}: {exc}") from exc
        steps.append((earlier, later, est))
    return MultiYearResult(target_year, tuple(steps),
                           contrast.combine([e.point for _, _, e in steps]), contrast)


ESTIMATE_COLUMNS = ["method", "coverage", "point", "ci_low", "ci_high", "n_matched", "n_dropped"]


def write_estimates(estimates: Sequence[RateChangeEstimate], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ESTIMATE_COLUMNS + ["ci_level", "contrast", "target_year", "n_excluded"])
        for e in estimates:
            writer.writerow([e.method, e.coverage, repr(e.point),
                             "" if e.ci_low is None else repr(e.ci_low),
                             "" if e.ci_high is None else repr(e.ci_high),
                             e.n_matched, e.n_dropped, "" if e.ci_level is None else e.ci_level,
                             e.contrast.value, e.target_year, e.n_excluded])


def read_estimates(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
