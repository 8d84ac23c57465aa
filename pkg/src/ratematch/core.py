"""Domain model: policies, covariate roles, portfolios and rate-change estimates."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

CovariateValue = Union[float, int, str]

TOTAL = "total"


class RateMatchError(ValueError):
    """Base class for every error raised by the package."""


class Kind(str, enum.Enum):
    NUMERIC = "numeric"
    ORDINAL = "ordinal"
    CATEGORICAL = "categorical"


class MatchMode(str, enum.Enum):
    EXACT = "exact"
    APPROXIMATE = "approximate"
    IGNORE = "ignore"


class Contrast(str, enum.Enum):
    DIFFERENCE = "difference"
    RATIO = "ratio"

    def apply(self, later: float, earlier: float) -> float:
        """Contrast of two mean premiums; ratios are reported as percentages."""
        if self is Contrast.DIFFERENCE:
            return later - earlier
        if earlier <= 0:
            raise RateMatchError("ratio contrast needs a strictly positive denominator mean")
        return (later / earlier - 1.0) * 100.0

    def combine(self, steps: Sequence[float]) -> float:
        """Chain consecutive-year contrasts into one overall contrast."""
        if self is Contrast.DIFFERENCE:
            return float(sum(steps))
        return (math.prod(1.0 + s / 100.0 for s in steps) - 1.0) * 100.0


class IdentityLevels(Mapping):
    """Ordinal scores equal to the level index itself (``P4`` -> 4.0)."""

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)) and not isinstance(key, bool) and key >= 0:
            return float(key)
        raise KeyError(key)

    def __contains__(self, key):
        return isinstance(key, (int, np.integer)) and not isinstance(key, bool) and key >= 0

    def __iter__(self):
        return iter(())

    def __len__(self):
        return 0

    def __eq__(self, other):
        return isinstance(other, IdentityLevels)

    def __hash__(self):
        return hash(IdentityLevels)

    def __repr__(self):
        return "IdentityLevels()"


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: Kind
    match_mode: MatchMode = MatchMode.APPROXIMATE
    confounder: bool = True
    # ordinal level index -> numeric score; required for approximate ordinals
    level_values: Mapping[int, float] | None = None
    # reference level for dummy coding of categoricals (default: first sorted label)
    reference: str | None = None
    # caliper in standard deviations; 0 is exact matching
    caliper: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "match_mode", MatchMode(self.match_mode))
        if self.kind is Kind.CATEGORICAL and self.match_mode is MatchMode.APPROXIMATE:
            raise RateMatchError(
                f"categorical covariate {self.name!r} must be matched exactly or ignored")
        if (self.kind is Kind.ORDINAL and self.match_mode is MatchMode.APPROXIMATE
                and self.level_values is None):
            raise RateMatchError(
                f"ordinal covariate {self.name!r} needs level_values for approximate matching")
        if self.caliper is not None and self.caliper < 0:
            raise RateMatchError(f"caliper for {self.name!r} must be nonnegative")
        if self.level_values is not None and not isinstance(self.level_values, IdentityLevels):
            object.__setattr__(self, "level_values",
                               MappingProxyType({int(k): float(v) for k, v in self.level_values.items()}))

    def check_value(self, value) -> CovariateValue:
        """Validate one value against this spec's kind and return it normalized."""
        if self.kind is Kind.NUMERIC:
            if isinstance(value, (bool, str)) or not isinstance(value, (int, float, np.number)):
                raise RateMatchError(f"{self.name}: expected a number, got {value!r}")
            value = float(value)
            if not math.isfinite(value):
                raise RateMatchError(f"{self.name}: non-finite value")
            return value
        if self.kind is Kind.ORDINAL:
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 0:
                raise RateMatchError(f"{self.name}: expected an ordinal level index >= 0, got {value!r}")
            if self.level_values is not None and int(value) not in self.level_values:
                raise RateMatchError(f"{self.name}: level {value} has no declared numeric value")
            return int(value)
        if not isinstance(value, str):
            raise RateMatchError(f"{self.name}: expected a category label, got {value!r}")
        return value

    def numeric(self, value: CovariateValue) -> float:
        if self.kind is Kind.CATEGORICAL:
            raise RateMatchError(f"{self.name} is categorical and has no numeric value")
        if self.kind is Kind.ORDINAL and self.level_values is not None:
            return self.level_values[int(value)]
        return float(value)


@dataclass(frozen=True)
class Policy:
    id: str
    year: int
    premiums: Mapping[str, float]
    covariates: tuple

    def __post_init__(self):
        prem = {str(k): float(v) for k, v in self.premiums.items()}
        if TOTAL not in prem:
            raise RateMatchError(f"policy {self.id}: missing {TOTAL!r} premium")
        for k, v in prem.items():
            if not v >= 0:
                raise RateMatchError(f"policy {self.id}: negative premium for {k!r}")
        object.__setattr__(self, "premiums", MappingProxyType(prem))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "year", int(self.year))


@dataclass(frozen=True)
class Portfolio:
    """Policies written over one or more years, sharing one covariate layout."""

    specs: tuple[CovariateSpec, ...]
    policies: tuple[Policy, ...] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "policies", tuple(self.policies))
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise RateMatchError("duplicate covariate names")
        seen = set()
        k = len(self.specs)
        for p in self.policies:
            if len(p.covariates) != k:
                raise RateMatchError(
                    f"policy {p.id}: {len(p.covariates)} covariates, expected {k}")
            for spec, value in zip(self.specs, p.covariates):
                spec.check_value(value)
            key = (p.id, p.year)
            if key in seen:
                raise RateMatchError(f"duplicate policy {p.id} in year {p.year}")
            seen.add(key)

    def __len__(self):
        return len(self.policies)

    def spec(self, name: str) -> CovariateSpec:
        return self.specs[self.spec_index(name)]

    def spec_index(self, name: str) -> int:
        for i, s in enumerate(self.specs):
            if s.name == name:
                return i
        raise RateMatchError(f"unknown covariate {name!r}")

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([p.id for p in self.policies], dtype=object)

    @cached_property
    def years(self) -> np.ndarray:
        return np.array([p.year for p in self.policies], dtype=np.int64)

    @cached_property
    def year_values(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.years.tolist())))

    @cached_property
    def _cache(self) -> dict:
        return {}

    def premium(self, coverage: str = TOTAL) -> np.ndarray:
        """Premium array for one coverage; policies lacking it count as 0."""
        key = ("premium", coverage)
        if key not in self._cache:
            if not any(coverage in p.premiums for p in self.policies):
                raise RateMatchError(f"unknown coverage {coverage!r}")
            arr = np.array([p.premiums.get(coverage, 0.0) for p in self.policies], dtype=float)
            arr.flags.writeable = False
            self._cache[key] = arr
        return self._cache[key]

    def values(self, name: str) -> np.ndarray:
        """Raw covariate values (object array)."""
        key = ("raw", name)
        if key not in self._cache:
            i = self.spec_index(name)
            arr = np.array([p.covariates[i] for p in self.policies], dtype=object)
            arr.flags.writeable = False
            self._cache[key] = arr
        return self._cache[key]

    def numeric(self, name: str) -> np.ndarray:
        """Covariate values on their numeric scale (ordinals via level_values)."""
        key = ("num", name)
        if key not in self._cache:
            i = self.spec_index(name)
            spec = self.specs[i]
            arr = np.array([spec.numeric(p.covariates[i]) for p in self.policies], dtype=float)
            arr.flags.writeable = False
            self._cache[key] = arr
        return self._cache[key]

    def year_mask(self, year: int) -> np.ndarray:
        return self.years == year

    @classmethod
    def _trusted(cls, specs, policies) -> "Portfolio":
        # policies already validated against these specs; skip the per-value checks
        obj = object.__new__(cls)
        object.__setattr__(obj, "specs", tuple(specs))
        object.__setattr__(obj, "policies", tuple(policies))
        return obj

    def select(self, index: Iterable[int]) -> "Portfolio":
        """Sub-portfolio of the given positions (repeats allowed, ids are then re-keyed)."""
        index = list(index)
        if len(set(index)) == len(index):
            return Portfolio._trusted(self.specs, (self.policies[i] for i in index))
        counts: Counter = Counter()
        picked = []
        for i in index:
            p = self.policies[i]
            counts[i] += 1
            picked.append(p if counts[i] == 1 else replace(p, id=f"{p.id}#{counts[i]}"))
        return Portfolio._trusted(self.specs, picked)

    def select_years(self, years: Iterable[int]) -> "Portfolio":
        keep = set(int(y) for y in years)
        return Portfolio._trusted(self.specs, (p for p in self.policies if p.year in keep))

    def with_covariate(self, spec: CovariateSpec, values: Sequence) -> "Portfolio":
        """Append a derived covariate (e.g. a propensity linear predictor)."""
        if len(values) != len(self.policies):
            raise RateMatchError("derived covariate length mismatch")
        policies = tuple(replace(p, covariates=p.covariates + (spec.check_value(v),))
                         for p, v in zip(self.policies, values))
        return Portfolio(self.specs + (spec,), policies)

    def default_years(self, target_year: int | None = None,
                      comparison_year: int | None = None) -> tuple[int, int]:
        """Resolve (target, comparison) years; defaults are the later and earlier year."""
        years = self.year_values
        if target_year is None:
            if len(years) != 2:
                raise RateMatchError(
                    f"need exactly two years to infer the target year, found {list(years)}")
            target_year = years[-1]
        if comparison_year is None:
            others = [y for y in years if y != target_year]
            if len(others) != 1:
                raise RateMatchError("comparison year is ambiguous; pass it explicitly")
            comparison_year = others[0]
        for y in (target_year, comparison_year):
            if y not in years:
                raise RateMatchError(f"year {y} has no policies")
        if target_year == comparison_year:
            raise RateMatchError("target and comparison year must differ")
        return int(target_year), int(comparison_year)


@dataclass(frozen=True)
class RateChangeEstimate:
    method: str
    target_year: int
    contrast: Contrast
    coverage: str
    point: float
    ci_low: float | None = None
    ci_high: float | None = None
    ci_level: float | None = None
    n_matched: int = 0
    n_dropped: int = 0
    n_excluded: int = 0

    def __post_init__(self):
        if (self.ci_low is None) != (self.ci_high is None):
            raise RateMatchError("confidence interval needs both bounds")
        if self.ci_low is not None:
            if self.ci_low > self.ci_high:
                raise RateMatchError("ci_low exceeds ci_high")
            if not 0 < self.ci_level < 1:
                raise RateMatchError("ci_level must lie in (0, 1)")

    def with_ci(self, low: float, high: float, level: float) -> "RateChangeEstimate":
        return replace(self, ci_low=float(low), ci_high=float(high), ci_level=float(level))


def _equal_frequency_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(values, np.linspace(0, 1, n_bins + 1)[1:-1]))
    return edges


def empirical_mix(portfolio: Portfolio, year: int, n_bins: int = 10) -> dict[tuple, float]:
    """Share of the year's policies in each covariate profile.

    The profile is the tuple of exact-mode values followed by the equal-frequency
    bin index of each approximate covariate (edges taken from all years pooled).
    """
    mask = portfolio.year_mask(year)
    n = int(mask.sum())
    if n == 0:
        raise RateMatchError(f"year {year} has no policies")
    parts = []
    for spec in portfolio.specs:
        if spec.match_mode is MatchMode.EXACT:
            parts.append(portfolio.values(spec.name)[mask])
        elif spec.match_mode is MatchMode.APPROXIMATE:
            x = portfolio.numeric(spec.name)
            edges = _equal_frequency_bins(x, n_bins)
            parts.append(np.searchsorted(edges, x[mask], side="right"))
    if not parts:
        return {(): 1.0}
    counts = Counter(zip(*(p.tolist() for p in parts)))
    return {k: c / n for k, c in counts.items()}
