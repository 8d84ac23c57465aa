"""Additive design matrices: intercept, numeric columns and k-1 dummies per categorical."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .core import CovariateSpec, Kind, Portfolio, RateMatchError


@dataclass(frozen=True)
class Term:
    name: str
    covariate: str | None = None
    level: str | None = None


INTERCEPT = Term("intercept")


def build_terms(portfolio: Portfolio, specs: Sequence[CovariateSpec]) -> list[Term]:
    """Intercept first, then one term per numeric/ordinal and k-1 per categorical.

    Columns that are constant over ``portfolio`` are left out.
    """
    terms = [INTERCEPT]
    for spec in specs:
        if spec.kind is Kind.CATEGORICAL:
            levels = sorted(set(portfolio.values(spec.name).tolist()))
            ref = spec.reference if spec.reference is not None else levels[0]
            if ref not in levels:
                raise RateMatchError(f"reference level {ref!r} of {spec.name} not observed")
            terms += [Term(f"{spec.name}[{lvl}]", spec.name, lvl) for lvl in levels if lvl != ref]
        else:
            x = portfolio.numeric(spec.name)
            if np.ptp(x) > 0:
                terms.append(Term(spec.name, spec.name))
    return terms


def design_matrix(portfolio: Portfolio, terms: Sequence[Term]) -> np.ndarray:
    n = len(portfolio)
    X = np.empty((n, len(terms)))
    for j, term in enumerate(terms):
        if term.covariate is None:
            X[:, j] = 1.0
        elif term.level is None:
            X[:, j] = portfolio.numeric(term.covariate)
        else:
            X[:, j] = portfolio.values(term.covariate) == term.level
    return X


def design_row(specs: Sequence[CovariateSpec], covariates: Sequence, terms: Sequence[Term],
               references: dict[str, str]) -> np.ndarray:
    """Design row for one policy; categorical levels not seen at fit time raise."""
    index = {s.name: i for i, s in enumerate(specs)}
    for cov, ref in references.items():
        value = covariates[index[cov]]
        if value != ref and not any(t.covariate == cov and t.level == value for t in terms):
            raise RateMatchError(f"unseen level {value!r} for covariate {cov}")
    row = np.empty(len(terms))
    for j, term in enumerate(terms):
        if term.covariate is None:
            row[j] = 1.0
            continue
        spec = specs[index[term.covariate]]
        value = covariates[index[term.covariate]]
        row[j] = spec.numeric(value) if term.level is None else float(value == term.level)
    return row


def references(portfolio: Portfolio, specs: Sequence[CovariateSpec]) -> dict[str, str]:
    out = {}
    for spec in specs:
        if spec.kind is Kind.CATEGORICAL:
            levels = sorted(set(portfolio.values(spec.name).tolist()))
            out[spec.name] = spec.reference if spec.reference is not None else levels[0]
    return out


def check_rank(X: np.ndarray, terms: Sequence[Term]) -> None:
    """Raise naming the collinear columns if ``X`` is column-rank deficient."""
    if X.shape[0] < X.shape[1]:
        raise RateMatchError(f"design has {X.shape[1]} columns but only {X.shape[0]} rows")
    scale = np.sqrt((X ** 2).sum(axis=0))
    scale[scale == 0] = 1.0
    _, R, piv = scipy.linalg.qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 1e3
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        bad = [terms[j].name for j in piv[rank:]]
        raise RateMatchError(f"rank-deficient design; collinear columns: {', '.join(bad)}")
