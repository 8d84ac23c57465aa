"""Mahalanobis and weighted (generalized) Mahalanobis distances between policies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .core import CovariateSpec, MatchMode, Policy, Portfolio, RateMatchError

RIDGE_START = 1e-8
RIDGE_MAX = 1e-2
SINGULAR_RCOND = 1e-12


@dataclass(frozen=True)
class WeightMatrix:
    """Diagonal weights, one per approximate covariate."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).copy()
        if w.ndim != 1 or w.size == 0:
            raise RateMatchError("weights must be a nonempty vector")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise RateMatchError("weights must be finite and nonnegative")
        if not np.any(w > 0):
            raise RateMatchError("at least one weight must be positive")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def identity(cls, k: int) -> "WeightMatrix":
        return cls(np.ones(k))

    def __len__(self):
        return self.weights.size


@dataclass(frozen=True)
class MetricContext:
    names: tuple[str, ...]
    covariance: np.ndarray
    # lower-triangular U with U.T @ U == inv(covariance)
    inv_factor: np.ndarray
    sd: np.ndarray
    calipers: np.ndarray
    ridge: float = 0.0

    @property
    def k(self) -> int:
        return len(self.names)

    def coordinates(self, portfolio: Portfolio) -> np.ndarray:
        """Raw approximate-covariate matrix (n x k) in this context's column order."""
        return np.column_stack([portfolio.numeric(n) for n in self.names])

    def standardize(self, X: np.ndarray) -> np.ndarray:
        """Rows mapped through the inverse Cholesky factor; MD becomes Euclidean."""
        return np.asarray(X, dtype=float) @ self.inv_factor.T

    def vector(self, specs: Sequence[CovariateSpec], policy: Policy) -> np.ndarray:
        index = {s.name: i for i, s in enumerate(specs)}
        return np.array([specs[index[n]].numeric(policy.covariates[index[n]]) for n in self.names])


def build_context(portfolio: Portfolio, specs: Sequence[CovariateSpec] | None = None) -> MetricContext:
    """Pooled-sample covariance of the approximate covariates and its inverse factor."""
    specs = tuple(specs or portfolio.specs)
    approx = [s for s in specs if s.match_mode is MatchMode.APPROXIMATE]
    if len(portfolio) < 2:
        raise RateMatchError("need at least two policies to estimate a covariance")
    if not approx:
        raise RateMatchError("no approximate-mode covariates to build a metric from")
    names = tuple(s.name for s in approx)
    X = np.column_stack([portfolio.numeric(n) for n in names])
    S = np.atleast_2d(np.cov(X, rowvar=False))
    var = np.diag(S).copy()
    for name, v in zip(names, var):
        if not v > 0:
            raise RateMatchError(
                f"covariate {name} has zero variance; set it to exact or ignore")
    ridge = 0.0
    S_used = S
    while True:
        eig = np.linalg.eigvalsh(S_used)
        ok = eig[0] > SINGULAR_RCOND * eig[-1]
        if ok:
            try:
                L = np.linalg.cholesky(S_used)
                break
            except np.linalg.LinAlgError:
                pass
        ridge = RIDGE_START if ridge == 0.0 else ridge * 10
        if ridge > RIDGE_MAX * (1 + 1e-9):
            raise RateMatchError("covariance matrix is singular even after ridge regularization")
        S_used = S + ridge * np.diag(var)
    U = scipy.linalg.solve_triangular(L, np.eye(len(names)), lower=True)
    calipers = np.array([np.nan if s.caliper is None else s.caliper for s in approx])
    return MetricContext(names, S_used, U, np.sqrt(var), calipers, ridge)


def md(ctx: MetricContext, xi, xj) -> float:
    d = _diff(ctx, xi, xj)
    z = ctx.inv_factor @ d
    return float(np.sqrt(z @ z))


def gmd(ctx: MetricContext, w: WeightMatrix, xi, xj) -> float:
    if len(w) != ctx.k:
        raise RateMatchError(f"weight vector has {len(w)} entries, metric has {ctx.k}")
    z = ctx.inv_factor @ _diff(ctx, xi, xj)
    return float(np.sqrt(np.sum(w.weights * z * z)))


def _diff(ctx: MetricContext, xi, xj) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    if xi.shape != (ctx.k,) or xj.shape != (ctx.k,):
        raise RateMatchError(f"covariate vectors must have length {ctx.k}")
    return xi - xj


def admissible(ctx: MetricContext | None, specs: Sequence[CovariateSpec],
               pi: Policy, pj: Policy) -> bool:
    """Exact-mode covariates equal and every caliper satisfied."""
    for s, a, b in zip(specs, pi.covariates, pj.covariates):
        if s.match_mode is MatchMode.EXACT and a != b:
            return False
    if ctx is None:
        return True
    index = {s.name: i for i, s in enumerate(specs)}
    for name, sd, cal in zip(ctx.names, ctx.sd, ctx.calipers):
        if np.isnan(cal):
            continue
        i = index[name]
        delta = abs(specs[i].numeric(pi.covariates[i]) - specs[i].numeric(pj.covariates[i]))
        if delta > cal * sd:
            return False
    return True
