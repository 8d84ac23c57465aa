"""Rate-change estimation for insurance portfolios by matched sampling."""

from .bootstrap import BootstrapConfig, BootstrapResult, Scheme, bootstrap_ci
from .core import (Contrast, CovariateSpec, IdentityLevels, Kind, MatchMode, Policy, Portfolio,
                   RateChangeEstimate, RateMatchError)
from .distance import MetricContext, WeightMatrix, build_context, gmd, md
from .estimator import (Link, estimate_ipw, estimate_matched, estimate_multi_year, estimate_naive,
                        fit_premium_regression, regression_rate_change)
from .genmatch import GaConfig, GaResult, optimize
from .ingest import load_portfolio, schema_from_dict
from .matcher import MatchedSample, MatchOptions, Mode, Order, Ties, drop_rate, match_portfolio
from .pipeline import MatchPlan, multi_year, run_match
from .propensity import PropensityModel, fit_logistic, propensity_scores

__version__ = "0.1.0"

__all__ = [
    "BootstrapConfig", "BootstrapResult", "Contrast", "CovariateSpec", "GaConfig", "GaResult",
    "IdentityLevels", "Kind", "Link", "MatchMode", "MatchOptions", "MatchPlan", "MatchedSample",
    "MetricContext", "Mode", "Order", "Policy", "Portfolio", "PropensityModel", "RateChangeEstimate",
    "RateMatchError", "Scheme", "Ties", "WeightMatrix", "bootstrap_ci", "build_context", "drop_rate",
    "estimate_ipw", "estimate_matched", "estimate_multi_year", "estimate_naive", "fit_logistic",
    "fit_premium_regression", "gmd", "load_portfolio", "match_portfolio", "md", "multi_year",
    "optimize", "propensity_scores", "regression_rate_change", "run_match", "schema_from_dict",
]
