"""Covariate balance diagnostics: weighted KS and Welch t tests, SMDs and QQ pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special, stats

from .core import CovariateSpec, Kind, MatchMode, Portfolio, RateMatchError
from .matcher import MatchedSample

# exact permutation KS p-values are used for unweighted samples up to this n_a * n_b
EXACT_KS_MAX = 10_000
_EPS = 1e-12


def _prep(x, w):
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise RateMatchError("empty sample")
    if w is None:
        w = np.ones_like(x)
    else:
        w = np.asarray(w, dtype=float).ravel()
        if w.shape != x.shape:
            raise RateMatchError("weights and values differ in length")
        if np.any(w <= 0):
            raise RateMatchError("weights must be positive")
    return x, w


def kish(w: np.ndarray) -> float:
    """Kish effective sample size (sum w)^2 / sum w^2."""
    return float(w.sum() ** 2 / np.sum(w * w))


def _uniform(w):
    return np.all(w == w[0])


def weighted_moments(x, w=None) -> tuple[float, float]:
    """Weighted mean and (ddof=0) variance."""
    x, w = _prep(x, w)
    m = float(np.sum(w * x) / w.sum())
    return m, float(np.sum(w * (x - m) ** 2) / w.sum())


def _ecdf_gap(a, wa, b, wb):
    grid = np.unique(np.concatenate([a, b]))
    Fa = _ecdf(a, wa, grid)
    Fb = _ecdf(b, wb, grid)
    return float(np.max(np.abs(Fa - Fb)))


def _ecdf(x, w, grid):
    order = np.argsort(x, kind="stable")
    xs, cw = x[order], np.cumsum(w[order])
    idx = np.searchsorted(xs, grid, side="right")
    F = np.where(idx > 0, cw[np.maximum(idx - 1, 0)], 0.0) / cw[-1]
    return F


def ks_exact_pvalue(a, b, D: float) -> float:
    """P(D* >= D) over all relabellings of the pooled sample, ties included.

    Counts label assignments group by group over the distinct pooled values,
    absorbing paths as soon as the ECDF gap reaches ``D``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    N = na + nb
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    live = np.zeros(na + 1)
    live[0] = 1.0
    exceeded = 0.0
    K = 0
    i = np.arange(na + 1)
    for c in counts:
        new = np.zeros(na + 1)
        for j in range(c + 1):
            if j > na:
                break
            new[j:] += live[:na + 1 - j] * special.comb(c, j)
        K += c
        feasible = (i <= K) & (K - i <= nb)
        new[~feasible] = 0.0
        gap = np.abs(i / na - (K - i) / nb)
        out = feasible & (gap >= D - _EPS)
        if np.any(out):
            rest = special.comb(N - K, na - i[out])
            exceeded += float(np.sum(new[out] * rest))
            new[out] = 0.0
        live = new
    return float(min(1.0, exceeded / special.comb(N, na)))


def ks_asymptotic_pvalue(D: float, n_a: float, n_b: float) -> float:
    """Kolmogorov tail Q(lambda) with the small-sample correction to lambda."""
    if D <= 0:
        return 1.0
    ne = n_a * n_b / (n_a + n_b)
    lam = (np.sqrt(ne) + 0.12 + 0.11 / np.sqrt(ne)) * D
    return float(np.clip(special.kolmogorov(lam), 0.0, 1.0))


def ks_test(a, b, wa=None, wb=None, method: str = "auto") -> tuple[float, float]:
    """Two-sample KS statistic on weighted ECDFs and its p-value.

    ``method`` is ``"exact"`` (unweighted only), ``"asymptotic"`` or ``"auto"``,
    which goes exact for small unweighted samples.
    """
    a, wa = _prep(a, wa)
    b, wb = _prep(b, wb)
    D = _ecdf_gap(a, wa, b, wb)
    unweighted = _uniform(wa) and _uniform(wb)
    if method == "auto":
        method = "exact" if unweighted and a.size * b.size <= EXACT_KS_MAX else "asymptotic"
    if method == "exact":
        if not unweighted:
            raise RateMatchError("exact KS p-values need unweighted samples")
        return D, ks_exact_pvalue(a, b, D)
    if method != "asymptotic":
        raise RateMatchError(f"unknown KS method {method!r}")
    return D, ks_asymptotic_pvalue(D, kish(wa), kish(wb))


def t_test(a, b, wa=None, wb=None) -> tuple[float, float]:
    """Welch two-sample t test with Kish effective sizes for weighted samples."""
    a, wa = _prep(a, wa)
    b, wb = _prep(b, wb)
    ma, va = weighted_moments(a, wa)
    mb, vb = weighted_moments(b, wb)
    na, nb = kish(wa), kish(wb)
    same_mean = abs(ma - mb) <= _EPS * max(1.0, abs(ma), abs(mb))
    if na < 2 - 1e-9 or nb < 2 - 1e-9:
        return (0.0, 1.0) if same_mean else (float(np.sign(ma - mb)) * np.inf, 0.0)
    va *= na / (na - 1)
    vb *= nb / (nb - 1)
    se2 = va / na + vb / nb
    if se2 <= 0:
        return (0.0, 1.0) if same_mean else (float(np.sign(ma - mb)) * np.inf, 0.0)
    t = (ma - mb) / np.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return float(t), float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


def smd(a, b, wa=None, wb=None) -> float:
    """(mean_a - mean_b) / sqrt((var_a + var_b) / 2) with weighted ddof=0 moments."""
    ma, va = weighted_moments(a, wa)
    mb, vb = weighted_moments(b, wb)
    pooled = (va + vb) / 2
    if pooled <= 0:
        if abs(ma - mb) <= _EPS * max(1.0, abs(ma), abs(mb)):
            return 0.0
        raise RateMatchError("zero pooled variance with unequal means")
    return float((ma - mb) / np.sqrt(pooled))


def weighted_quantile(x, q, w=None) -> np.ndarray:
    """Quantiles with midpoint plotting positions and linear interpolation."""
    x, w = _prep(x, w)
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    pos = (np.cumsum(ws) - ws / 2) / ws.sum()
    return np.interp(np.asarray(q, dtype=float), pos, xs)


def qq_pairs(a, b, n_points: int, wa=None, wb=None) -> list[tuple[float, float]]:
    """Matching quantiles of two samples at probabilities (i + 0.5) / n_points."""
    if n_points < 1:
        raise RateMatchError("n_points must be at least 1")
    probs = (np.arange(n_points) + 0.5) / n_points
    qa = weighted_quantile(a, probs, wa)
    qb = weighted_quantile(b, probs, wb)
    return list(zip(qa.tolist(), qb.tolist()))


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    test: str
    statistic: float
    p_value: float
    smd: float
    detail: str = ""


@dataclass(frozen=True)
class BalanceReport:
    stage: str
    rows: tuple[BalanceRow, ...]
    n_target: int
    n_comparison: int

    @property
    def min_p(self) -> float:
        return min((r.p_value for r in self.rows), default=1.0)

    def p_values(self) -> dict[str, float]:
        return {r.covariate: r.p_value for r in self.rows}

    def row(self, covariate: str) -> BalanceRow:
        for r in self.rows:
            if r.covariate == covariate:
                return r
        raise KeyError(covariate)


@dataclass
class BalanceData:
    """Two-year covariate columns prepared once for repeated balance checks."""

    portfolio: Portfolio
    specs: tuple[CovariateSpec, ...]
    target_year: int
    comparison_year: int

    def __post_init__(self):
        self.columns = []
        for spec in self.specs:
            if spec.kind is Kind.CATEGORICAL:
                raw = self.portfolio.values(spec.name)
                levels = sorted(set(raw.tolist()))
                cols = [(lvl, (raw == lvl).astype(float)) for lvl in levels]
                self.columns.append((spec, "T", cols))
            else:
                x = self.portfolio.numeric(spec.name)
                test = "T" if np.unique(x).size <= 2 else "KS"
                self.columns.append((spec, test, [("", x)]))


def _test_rows(data: BalanceData, ia, wa, ib, wb, after: bool) -> tuple[BalanceRow, ...]:
    rows = []
    for spec, test, cols in data.columns:
        if after and spec.match_mode is MatchMode.EXACT:
            rows.append(BalanceRow(spec.name, test, 0.0, 1.0, 0.0, "matched exactly"))
            continue
        if test == "KS":
            (_, x), = cols
            stat, p = ks_test(x[ia], x[ib], wa, wb)
            rows.append(BalanceRow(spec.name, "KS", stat, p, _safe_smd(x[ia], x[ib], wa, wb)))
            continue
        best = None
        worst_smd = 0.0
        for level, x in cols:
            stat, p = t_test(x[ia], x[ib], wa, wb)
            s = _safe_smd(x[ia], x[ib], wa, wb)
            if abs(s) > abs(worst_smd):
                worst_smd = s
            if best is None or p < best[1]:
                best = (stat, p, level)
        detail = f"level {best[2]}" if spec.kind is Kind.CATEGORICAL else ""
        rows.append(BalanceRow(spec.name, "T", best[0], best[1], worst_smd, detail))
    return tuple(rows)


def _safe_smd(a, b, wa, wb):
    try:
        return smd(a, b, wa, wb)
    except RateMatchError:
        return float("nan")


def balance_report(portfolio: Portfolio, sample: MatchedSample | None = None,
                   specs: Sequence[CovariateSpec] | None = None,
                   target_year: int | None = None, comparison_year: int | None = None,
                   data: BalanceData | None = None) -> BalanceReport:
    """Balance of the confounders across years, before (no ``sample``) or after matching.

    Binary covariates get a t test, other numeric/ordinal ones a KS test and
    categoricals the smallest-p t test over their level indicators. After matching,
    comparison policies carry their tie weights and exact-mode covariates report p = 1.
    """
    if sample is not None:
        target_year, comparison_year = sample.target_year, sample.comparison_year
    target_year, comparison_year = portfolio.default_years(target_year, comparison_year)
    if data is None:
        specs = tuple(s for s in (specs or portfolio.specs) if s.confounder)
        data = BalanceData(portfolio, specs, target_year, comparison_year)
    if sample is None:
        ia = np.flatnonzero(portfolio.years == target_year)
        ib = np.flatnonzero(portfolio.years == comparison_year)
        return BalanceReport("before", _test_rows(data, ia, None, ib, None, False), ia.size, ib.size)
    n = len(portfolio)
    wt = np.bincount(sample.target_index, weights=sample.weight, minlength=n)
    wc = np.bincount(sample.comparison_index, weights=sample.weight, minlength=n)
    ia, ib = np.flatnonzero(wt > 0), np.flatnonzero(wc > 0)
    rows = _test_rows(data, ia, wt[ia], ib, wc[ib], True)
    return BalanceReport("after", rows, ia.size, ib.size)


def write_balance_csv(before: BalanceReport, after: BalanceReport | None, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["covariate", "test", "statistic", "p_before", "p_after",
                         "statistic_after", "smd_before", "smd_after"])
        for r in before.rows:
            a = after.row(r.covariate) if after is not None else None
            writer.writerow([r.covariate, r.test, repr(r.statistic), repr(r.p_value),
                             "" if a is None else repr(a.p_value),
                             "" if a is None else repr(a.statistic),
                             repr(r.smd), "" if a is None else repr(a.smd)])
        writer.writerow(["matched number", "", "", before.n_target,
                         "" if after is None else after.n_target, "", "", ""])
