import math

import numpy as np
import pytest

from ratematch.core import (Contrast, CovariateSpec, IdentityLevels, Kind, MatchMode, Policy,
                            Portfolio, RateChangeEstimate, RateMatchError, empirical_mix)

AGE = CovariateSpec("age", Kind.NUMERIC)
REGION = CovariateSpec("region", Kind.CATEGORICAL, MatchMode.EXACT)


def _pf(rows):
    return Portfolio((AGE, REGION), [Policy(i, y, {"total": p}, (a, r)) for i, y, p, a, r in rows])


def test_contrast_apply_and_combine():
    assert Contrast.RATIO.apply(107.4, 100.0) == pytest.approx(7.4)
    assert Contrast.DIFFERENCE.apply(107.4, 100.0) == pytest.approx(7.4)
    assert Contrast.RATIO.combine([5.0, 5.0]) == pytest.approx(10.25)
    assert Contrast.DIFFERENCE.combine([3.0, 4.0]) == 7.0


def test_categorical_cannot_be_approximate():
    with pytest.raises(RateMatchError, match="exactly or ignored"):
        CovariateSpec("region", Kind.CATEGORICAL, MatchMode.APPROXIMATE)


def test_approximate_ordinal_needs_level_values():
    with pytest.raises(RateMatchError, match="level_values"):
        CovariateSpec("power", Kind.ORDINAL)
    spec = CovariateSpec("power", Kind.ORDINAL, level_values=IdentityLevels())
    assert spec.numeric(7) == 7.0
    coarse = CovariateSpec("band", Kind.ORDINAL, level_values={0: 1.5, 1: 4.0})
    assert coarse.numeric(1) == 4.0
    with pytest.raises(RateMatchError, match="no declared numeric value"):
        coarse.check_value(2)


def test_value_kinds_are_checked():
    with pytest.raises(RateMatchError, match="expected a number"):
        AGE.check_value("40")
    with pytest.raises(RateMatchError, match="non-finite"):
        AGE.check_value(math.inf)
    with pytest.raises(RateMatchError, match="category label"):
        REGION.check_value(3)


def test_policy_validation():
    with pytest.raises(RateMatchError, match="missing 'total'"):
        Policy("a", 1, {"legal": 1.0}, ())
    with pytest.raises(RateMatchError, match="negative premium"):
        Policy("a", 1, {"total": -1.0}, ())


def test_portfolio_rejects_duplicates_and_bad_arity():
    with pytest.raises(RateMatchError, match="duplicate policy"):
        _pf([("a", 1, 1.0, 30.0, "N"), ("a", 1, 2.0, 31.0, "N")])
    with pytest.raises(RateMatchError, match="expected 2"):
        Portfolio((AGE, REGION), [Policy("a", 1, {"total": 1.0}, (30.0,))])
    # the same id in two years is a renewal, not a duplicate
    assert len(_pf([("a", 0, 1.0, 30.0, "N"), ("a", 1, 2.0, 31.0, "N")])) == 2


def test_select_rekeys_repeats():
    pf = _pf([("a", 0, 1.0, 30.0, "N"), ("b", 1, 2.0, 31.0, "S")])
    sub = pf.select([1, 0, 1, 1])
    assert sub.ids.tolist() == ["b", "a", "b#2", "b#3"]
    assert sub.premium().tolist() == [2.0, 1.0, 2.0, 2.0]


def test_default_years():
    pf = _pf([("a", 2003, 1.0, 30.0, "N"), ("b", 2004, 2.0, 31.0, "S")])
    assert pf.default_years() == (2004, 2003)
    assert pf.default_years(2003) == (2003, 2004)
    three = _pf([("a", 1, 1.0, 30.0, "N"), ("b", 2, 2.0, 31.0, "S"), ("c", 3, 2.0, 31.0, "S")])
    with pytest.raises(RateMatchError, match="exactly two years"):
        three.default_years()
    with pytest.raises(RateMatchError, match="has no policies"):
        pf.default_years(2005, 2003)


def test_premium_unknown_coverage():
    pf = _pf([("a", 0, 1.0, 30.0, "N")])
    with pytest.raises(RateMatchError, match="unknown coverage"):
        pf.premium("legal")


def test_estimate_interval_invariants():
    e = RateChangeEstimate("naive", 1, Contrast.RATIO, "total", 5.0)
    assert e.with_ci(4.0, 6.0, 0.95).ci_high == 6.0
    with pytest.raises(RateMatchError, match="exceeds"):
        e.with_ci(6.0, 4.0, 0.95)
    with pytest.raises(RateMatchError, match="both bounds"):
        RateChangeEstimate("naive", 1, Contrast.RATIO, "total", 5.0, ci_low=1.0)


def test_empirical_mix_deductible(deductible_pf):
    mix = empirical_mix(deductible_pf, 0)
    assert mix == {(1.0,): 0.2, (2.0,): 0.4, (5.0,): 0.1, (10.0,): 0.3}


def test_empirical_mix_single_policy():
    pf = _pf([("a", 0, 1.0, 30.0, "N")])
    assert list(empirical_mix(pf, 0).values()) == [1.0]


def test_empirical_mix_two_profiles():
    rows = [(f"p{i}", 0, 1.0, 20.0 + 40 * (i % 2), "N" if i % 2 else "S") for i in range(10)]
    mix = empirical_mix(_pf(rows), 0, n_bins=2)
    assert sorted(mix.values()) == [0.5, 0.5]
    with pytest.raises(RateMatchError, match="no policies"):
        empirical_mix(_pf(rows), 1)


def test_cached_arrays_are_read_only():
    pf = _pf([("a", 0, 1.0, 30.0, "N")])
    with pytest.raises(ValueError):
        pf.premium()[0] = 2.0
    assert isinstance(pf.numeric("age"), np.ndarray)
