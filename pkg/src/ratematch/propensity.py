"""Propensity of being written in the target year, by logistic regression fitted with IRLS."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import CovariateSpec, Kind, MatchMode, Policy, Portfolio, RateMatchError
from .design import Term, build_terms, check_rank, design_matrix, design_row, references

MAX_ITER = 100
TOL = 1e-8
SEPARATION_BOUND = 30.0
PSCORE = "pscore"


class SeparationError(RateMatchError):
    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


@dataclass(frozen=True)
class PropensityModel:
    terms: tuple[Term, ...]
    coefficients: np.ndarray
    specs: tuple[CovariateSpec, ...]
    references: dict
    target_year: int
    comparison_year: int
    iterations: int
    deviance: float
    converged: bool

    def coefficient(self, name: str) -> float:
        for t, b in zip(self.terms, self.coefficients):
            if t.name == name:
                return float(b)
        raise KeyError(name)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["term", "estimate"])
            for t, b in zip(self.terms, self.coefficients):
                writer.writerow([t.name, repr(float(b))])


def _deviance(y, mu):
    eps = 1e-300
    return -2.0 * float(np.sum(y * np.log(np.maximum(mu, eps)) + (1 - y) * np.log(np.maximum(1 - mu, eps))))


def _check_level_separation(portfolio: Portfolio, specs, y: np.ndarray) -> None:
    for spec in specs:
        if spec.kind is not Kind.CATEGORICAL:
            continue
        values = portfolio.values(spec.name)
        for level in sorted(set(values.tolist())):
            ys = y[values == level]
            if ys.min() == ys.max():
                raise SeparationError(
                    f"perfect separation: level {level!r} of {spec.name} occurs in only one year")


def irls_logistic(X: np.ndarray, y: np.ndarray, ridge: float = 0.0,
                  max_iter: int = MAX_ITER, tol: float = TOL):
    """Maximise the (optionally ridge-penalised) Bernoulli log-likelihood.

    Returns ``(beta, iterations, deviance, converged)``. The intercept (column 0)
    is never penalised. Steps that increase the penalised deviance are halved.
    """
    n, p = X.shape
    pen = np.full(p, ridge)
    pen[0] = 0.0
    beta = np.zeros(p)
    sd = X.std(axis=0)
    sd[0] = 1.0

    def objective(b):
        return _deviance(y, expit(X @ b)) + float(np.sum(pen * b * b))

    obj = objective(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = expit(eta)
        w = np.clip(mu * (1 - mu), 1e-12, None)
        grad = X.T @ (y - mu) - pen * beta
        H = (X * w[:, None]).T @ X + np.diag(pen)
        step = np.linalg.solve(H, grad)
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            new_obj = objective(cand)
            if new_obj <= obj + 1e-12 * max(1.0, abs(obj)):
                break
            t *= 0.5
        change = np.max(np.abs(cand - beta))
        beta, obj = cand, new_obj
        if np.any(np.abs(beta[1:] * sd[1:]) > SEPARATION_BOUND):
            j = 1 + int(np.argmax(np.abs(beta[1:] * sd[1:])))
            raise SeparationError("perfect separation detected (diverging coefficient)", column=j)
        if change < tol:
            converged = True
            break
    return beta, it, _deviance(y, expit(X @ beta)), converged


def fit_logistic(portfolio: Portfolio, specs: Sequence[CovariateSpec] | None = None,
                 target_year: int | None = None, comparison_year: int | None = None,
                 ridge: float = 0.0) -> PropensityModel:
    """Fit p(target year | covariates) on the confounder-flagged covariates."""
    target_year, comparison_year = portfolio.default_years(target_year, comparison_year)
    pf = portfolio.select_years([target_year, comparison_year])
    specs = tuple(s for s in (specs or pf.specs) if s.confounder)
    y = (pf.years == target_year).astype(float)
    if ridge == 0.0:
        _check_level_separation(pf, specs, y)
    terms = build_terms(pf, specs)
    X = design_matrix(pf, terms)
    check_rank(X, terms)
    try:
        beta, it, dev, converged = irls_logistic(X, y, ridge=ridge)
    except SeparationError as exc:
        term = terms[exc.column]
        raise SeparationError(f"perfect separation detected on covariate {term.covariate} "
                              f"(term {term.name})") from None
    return PropensityModel(
        terms=tuple(terms), coefficients=beta, specs=tuple(pf.specs),
        references=references(pf, specs), target_year=target_year,
        comparison_year=comparison_year, iterations=it, deviance=dev, converged=converged)


def linear_predictor(model: PropensityModel, policy: Policy) -> float:
    """x'beta for one policy laid out like the fitting portfolio."""
    if len(policy.covariates) < len(model.specs):
        raise RateMatchError(f"policy {policy.id} does not conform to the model's covariates")
    row = design_row(model.specs, policy.covariates, model.terms, model.references)
    return float(row @ model.coefficients)


def linear_predictors(model: PropensityModel, portfolio: Portfolio) -> np.ndarray:
    for cov, ref in model.references.items():
        known = {t.level for t in model.terms if t.covariate == cov} | {ref}
        unseen = set(portfolio.values(cov).tolist()) - known
        if unseen:
            raise RateMatchError(f"unseen level(s) {sorted(unseen)!r} for covariate {cov}")
    return design_matrix(portfolio, model.terms) @ model.coefficients


def propensity_score(model: PropensityModel, policy: Policy) -> float:
    return float(expit(linear_predictor(model, policy)))


def propensity_scores(model: PropensityModel, portfolio: Portfolio) -> np.ndarray:
    return expit(linear_predictors(model, portfolio))


def with_linear_predictor(portfolio: Portfolio, model: PropensityModel, name: str = PSCORE,
                          caliper: float | None = None) -> Portfolio:
    """Append the linear predictor as an approximate-mode, non-confounder covariate."""
    spec = CovariateSpec(name, Kind.NUMERIC, MatchMode.APPROXIMATE, confounder=False, caliper=caliper)
    return portfolio.with_covariate(spec, linear_predictors(model, portfolio).tolist())
