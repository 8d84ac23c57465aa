"""Confounded two-year portfolios with a planted multiplicative rate change.

Covariates are drawn once from a common distribution and the year is assigned
by a logistic model in them, so the propensity model is correctly specified.
Premiums are exp(linear in covariates) * (1 + delta)^T * mean-one lognormal
noise, so the log-premium regression is correctly specified and the rate
change holding any portfolio mix fixed is exactly ``delta``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ratematch.core import CovariateSpec, IdentityLevels, Kind, MatchMode, Policy, Portfolio

REGIONS = ("R1", "R2", "R3", "R4")
REGION_PROBS = (0.4, 0.3, 0.2, 0.1)
REGION_PREMIUM = {"R1": 0.0, "R2": 0.15, "R3": -0.1, "R4": 0.3}
REGION_YEAR = {"R1": 0.0, "R2": 0.2, "R3": -0.3, "R4": 0.4}
POWER_LEVELS = np.arange(4, 13)

SPECS = (
    CovariateSpec("region", Kind.CATEGORICAL, MatchMode.EXACT),
    CovariateSpec("age", Kind.NUMERIC),
    CovariateSpec("power", Kind.ORDINAL, level_values=IdentityLevels()),
    CovariateSpec("gender", Kind.NUMERIC),
)


def draw(n: int, seed: int, delta: float = 0.05, sigma: float = 0.05, year_shift: float = -0.7,
         year_scale: float = 0.35, premium_scale: float = 0.5, age_step: int = 1):
    """Arrays (region, age, power, gender, year, premium) for ``n`` policies."""
    rng = np.random.default_rng(seed)
    region = rng.choice(np.array(REGIONS), size=n, p=REGION_PROBS)
    age = 18.0 + age_step * rng.integers(0, 58 // age_step, size=n)
    power = rng.choice(POWER_LEVELS, size=n, p=np.linspace(2, 1, POWER_LEVELS.size) /
                       np.linspace(2, 1, POWER_LEVELS.size).sum())
    gender = (rng.random(n) < 0.45).astype(float)
    reg_t = np.array([REGION_YEAR[r] for r in region])
    logit = year_shift + year_scale * (0.02 * (age - 45) + 0.25 * (power - 8) + reg_t + 0.3 * gender)
    year = (rng.random(n) < 1 / (1 + np.exp(-logit))).astype(int)
    reg_p = np.array([REGION_PREMIUM[r] for r in region])
    log_f = 6.0 + premium_scale * (0.01 * (age - 45) + 0.08 * (power - 8) + reg_p + 0.05 * gender)
    noise = np.exp(sigma * rng.standard_normal(n) - sigma ** 2 / 2)
    premium = np.exp(log_f) * (1 + delta) ** year * noise
    return region, age, power, gender, year, premium


def make_portfolio(n: int, seed: int, **kw) -> Portfolio:
    region, age, power, gender, year, premium = draw(n, seed, **kw)
    policies = [Policy(f"p{i}", int(year[i]), {"total": float(premium[i])},
                       (str(region[i]), float(age[i]), int(power[i]), float(gender[i])))
                for i in range(n)]
    return Portfolio(SPECS, policies)


def write_csv(path: str | Path, n: int, seed: int, **kw) -> None:
    region, age, power, gender, year, premium = draw(n, seed, **kw)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "year", "total", "region", "age", "power", "gender"])
        for i in range(n):
            writer.writerow([f"p{i}", 2003 + int(year[i]), repr(float(premium[i])), region[i],
                             int(age[i]), f"P{int(power[i])}", int(gender[i])])


SCHEMA = {
    "id_column": "id",
    "year_column": "year",
    "premiums": {"total": "total"},
    "covariates": [
        {"name": "region", "kind": "categorical", "match": "exact"},
        {"name": "age", "kind": "numeric"},
        {"name": "power", "kind": "ordinal", "strip_prefix": "P", "level_values": "identity"},
        {"name": "gender", "kind": "numeric"},
    ],
}
