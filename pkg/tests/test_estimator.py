import numpy as np
import pytest

from ratematch.core import (Contrast, CovariateSpec, Kind, MatchMode, Policy, Portfolio,
                            RateMatchError)
from ratematch.distance import build_context
from ratematch.estimator import (Link, estimate_ipw, estimate_matched, estimate_multi_year,
                                 estimate_naive, fit_premium_regression, ipw_means,
                                 read_estimates, regression_rate_change, write_estimates)
from ratematch.matcher import MatchOptions, Ties, match_portfolio
from ratematch.propensity import fit_logistic

AGE = CovariateSpec("age", Kind.NUMERIC)
REGION = CovariateSpec("region", Kind.CATEGORICAL, MatchMode.EXACT)


def _pf(rows, specs=(AGE, REGION)):
    return Portfolio(specs, [Policy(i, y, {"total": p, "legal": p / 10}, c) for i, y, p, c in rows])


def test_identical_premiums_give_zero(deductible_pf):
    rows = [(p.id, p.year, 100.0, p.covariates) for p in deductible_pf.policies]
    pf = Portfolio(deductible_pf.specs, [Policy(i, y, {"total": w}, c) for i, y, w, c in rows])
    s = match_portfolio(pf, None, None, MatchOptions(replace=True), 1, 0)
    assert estimate_matched(s, pf, contrast=Contrast.RATIO).point == 0.0
    assert estimate_matched(s, pf, contrast=Contrast.DIFFERENCE).point == 0.0
    assert estimate_naive(pf).point == 0.0


def test_constant_pair_ratio():
    rows = [(f"e{i}", 0, 100.0 + i, (float(i), "N")) for i in range(5)]
    rows += [(f"l{i}", 1, 1.05 * (100.0 + i), (float(i), "N")) for i in range(5)]
    pf = _pf(rows)
    s = match_portfolio(pf, build_context(pf), None, MatchOptions(), 1, 0)
    assert estimate_matched(s, pf).point == pytest.approx(5.0, abs=1e-12)


def test_tie_weights_equal_row_expansion(deductible_pf):
    s = match_portfolio(deductible_pf, None, None, MatchOptions(replace=True, ties=Ties.KEEP_ALL), 1, 0)
    weighted = estimate_matched(s, deductible_pf).point
    # row expansion: replicate each pair lcm/m times so every target carries equal mass
    m = np.bincount(s.cluster)
    lcm = int(np.lcm.reduce(m))
    reps = (lcm // m)[s.cluster]
    prem = deductible_pf.premium()
    later = np.repeat(prem[s.target_index], reps).mean()
    earlier = np.repeat(prem[s.comparison_index], reps).mean()
    assert weighted == pytest.approx((later / earlier - 1) * 100, abs=1e-12)


def test_naive_examples():
    pf = _pf([("a", 0, 100.0, (1.0, "N")), ("b", 1, 107.4, (1.0, "N"))])
    assert estimate_naive(pf).point == pytest.approx(7.4)
    assert estimate_naive(pf, contrast=Contrast.DIFFERENCE).point == pytest.approx(7.4)


def test_zero_premiums_under_ratio():
    rows = [("a", 0, 100.0, (1.0, "N")), ("b", 0, 0.0, (2.0, "N")),
            ("a", 1, 110.0, (1.0, "N")), ("b", 1, 50.0, (2.0, "N"))]
    pf = _pf(rows)
    s = match_portfolio(pf, None, None, MatchOptions(), 1, 0)
    e = estimate_matched(s, pf)
    assert e.point == pytest.approx(10.0) and e.n_excluded == 1
    zero = _pf([("a", 0, 0.0, (1.0, "N")), ("a", 1, 10.0, (1.0, "N"))])
    s0 = match_portfolio(zero, None, None, MatchOptions(), 1, 0)
    with pytest.raises(RateMatchError, match="total"):
        estimate_matched(s0, zero)
    with pytest.raises(RateMatchError, match="zero premium"):
        estimate_naive(zero)


def _noiseless(kind):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(200):
        age = float(rng.integers(18, 80))
        region = ["N", "S", "E"][i % 3]
        year = int(rng.random() < 0.3 + 0.005 * (age - 18))
        base = 50 + 2 * age + {"N": 0, "S": 30, "E": -10}[region]
        if kind == "additive":
            prem = base + 10.0 * year
        else:
            prem = np.exp(4 + 0.01 * age + {"N": 0, "S": 0.2, "E": -0.1}[region]) * 1.05 ** year
        rows.append((f"p{i}", year, float(prem), (age, region)))
    return _pf(rows)


def test_regression_recovers_planted_change():
    add = fit_premium_regression(_noiseless("additive"), link=Link.IDENTITY)
    assert add.year_coefficient == pytest.approx(10.0, abs=1e-9)
    assert regression_rate_change(add, Contrast.DIFFERENCE).point == pytest.approx(10.0, abs=1e-9)
    mult = fit_premium_regression(_noiseless("multiplicative"), link=Link.LOG)
    assert mult.year_coefficient == pytest.approx(np.log(1.05), abs=1e-12)
    assert regression_rate_change(mult, Contrast.RATIO).point == pytest.approx(5.0, abs=1e-9)


def test_regression_row_order_and_weights():
    pf = _noiseless("multiplicative")
    perm = np.random.default_rng(1).permutation(len(pf))
    a = fit_premium_regression(pf, link=Link.LOG)
    b = fit_premium_regression(pf.select(perm.tolist()), link=Link.LOG)
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-10)
    w = fit_premium_regression(pf, link=Link.LOG, weights=np.full(len(pf), 2.0))
    np.testing.assert_allclose(a.coefficients, w.coefficients, atol=1e-10)


def test_regression_invalid_pairings():
    fit = fit_premium_regression(_noiseless("additive"), link=Link.IDENTITY)
    with pytest.raises(RateMatchError, match="depends on the policy characteristics"):
        regression_rate_change(fit, Contrast.RATIO)
    fit = fit_premium_regression(_noiseless("multiplicative"), link=Link.LOG)
    with pytest.raises(RateMatchError):
        regression_rate_change(fit, Contrast.DIFFERENCE)


def test_ipw_weights():
    # type x=1 is twice as likely in the target year: its comparison weight doubles
    pf = _pf([("a", 0, 100.0, (1.0, "N")), ("b", 0, 200.0, (0.0, "N")), ("c", 1, 150.0, (0.0, "N"))])
    scores = np.array([2 / 3, 1 / 2, 0.5])
    later, earlier, _ = ipw_means(pf, scores, "total", Contrast.RATIO, 1, 0)
    assert earlier == pytest.approx((2 * 100 + 1 * 200) / 3)
    assert later == 150.0


def test_ipw_constant_propensity_equals_naive():
    rows = [(f"p{i}", i % 2, 100.0 + 7 * i, (float(i % 3), "N")) for i in range(12)]
    pf = _pf(rows)
    later, earlier, _ = ipw_means(pf, np.full(12, 0.5), "total", Contrast.RATIO, 1, 0)
    assert Contrast.RATIO.apply(later, earlier) == pytest.approx(estimate_naive(pf).point)


def test_ipw_end_to_end():
    from synthetic import make_portfolio
    pf = make_portfolio(4000, 2)
    e = estimate_ipw(pf, fit_logistic(pf, target_year=1, comparison_year=0))
    assert abs(e.point - 5.0) < 1.0


def test_multi_year_chain():
    rows = []
    for y in range(3):
        rows += [(f"p{i}", y, 100.0 * (1 + i) * 1.05 ** y, (float(i), "N")) for i in range(4)]
    pf = _pf(rows)

    def pairwise(p, later, earlier):
        return estimate_naive(p, target_year=later, comparison_year=earlier)

    res = estimate_multi_year(pf, 2, pairwise)
    assert [e.point for _, _, e in res.steps] == pytest.approx([5.0, 5.0])
    assert res.chained == pytest.approx(10.25)
    two = pf.select_years([0, 1])
    one = estimate_multi_year(two, 1, pairwise)
    assert one.chained == pytest.approx(estimate_naive(two).point)
    with pytest.raises(RateMatchError, match="target year 7"):
        estimate_multi_year(pf, 7, pairwise)


def test_estimates_csv(tmp_path):
    from ratematch.core import RateChangeEstimate
    e = RateChangeEstimate("naive", 1, Contrast.RATIO, "total", 7.4).with_ci(5.0, 9.0, 0.95)
    write_estimates([e], tmp_path / "e.csv")
    (row,) = read_estimates(tmp_path / "e.csv")
    assert row["method"] == "naive" and float(row["point"]) == 7.4 and float(row["ci_high"]) == 9.0
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header.startswith("method,coverage,point,ci_low,ci_high,n_matched,n_dropped")
