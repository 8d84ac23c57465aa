"""Command-line pipeline: ingest, match, genmatch, estimate, report.

Every command reads one YAML run config; ``--workers``, ``--seed`` and ``--out``
override the config. Randomness flows from the global seed through named
sub-streams, so outputs depend only on (config, seed, data).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import balance as bal
from .bootstrap import BootstrapConfig, Scheme, bootstrap_ci
from .core import Contrast, Kind, Portfolio, RateChangeEstimate, RateMatchError, TOTAL
from .estimator import (Link, estimate_ipw, estimate_matched, estimate_naive, fit_premium_regression,
                        read_estimates, regression_rate_change, write_estimates)
from .genmatch import GaConfig, optimize, read_weights, write_weights
from .ingest import SchemaConfig, load_portfolio, schema_from_dict, subset, write_portfolio, write_rejects
from .matcher import MatchOptions, Mode, drop_rate
from .pipeline import (MatchPlan, ipw_point, multi_year, naive_point, pair_point, prepare,
                       regression_point, rematch_point, run_match)
from .propensity import fit_logistic

logger = logging.getLogger("ratematch")

WORKERS_ENV = "RATEMATCH_WORKERS"
MATCH_METHODS = ("classic", "pscore", "complete", "computational")
ESTIMATE_METHODS = ("naive",) + MATCH_METHODS + ("regression", "ipw")
MULTI_YEAR_METHODS = ("naive", "matched", "regression", "ipw")
STAGES = {"subset": 0, "ties": 1, "order": 2, "genmatch": 3, "bootstrap": 4}


def substream(seed: int, stage: str) -> int:
    """Seed for one pipeline stage, derived from the global seed."""
    return int(np.random.SeedSequence([seed, STAGES[stage]]).generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    data: Path
    schema: SchemaConfig
    target_year: int | None
    comparison_year: int | None
    subset_n: int | None
    match_opts: MatchOptions
    match_methods: tuple[str, ...]
    use_propensity: bool
    ridge: float
    pscore_caliper: float | None
    ga: GaConfig
    contrast: Contrast
    coverages: tuple[str, ...]
    link: Link
    estimate_methods: tuple[str, ...] | None
    multi_year: bool
    bootstrap: BootstrapConfig | None
    qq_points: int
    out: Path
    workers: int
    seed: int

    def plan(self, method: str, weights: Sequence[float] | None = None) -> MatchPlan:
        if method == "complete":
            return MatchPlan(replace(self.match_opts, mode=Mode.COMPLETE), use_propensity=False)
        if method == "pscore":
            return MatchPlan(replace(self.match_opts, mode=Mode.PROPENSITY), True, self.ridge,
                             pscore_caliper=self.pscore_caliper)
        return MatchPlan(replace(self.match_opts, mode=Mode.CLASSIC), self.use_propensity, self.ridge,
                         None if weights is None else tuple(weights), self.pscore_caliper)


def _section(cfg: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    value = cfg.get(name) or {}
    if not isinstance(value, Mapping):
        raise RateMatchError(f"config section {name!r} must be a mapping")
    return value


def _check_keys(section: Mapping[str, Any], name: str, allowed: set[str]) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise RateMatchError(f"unknown key(s) in {name}: {', '.join(unknown)}")


def _default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def parse_config(cfg: Mapping[str, Any], base: Path, workers: int | None = None,
                 seed: int | None = None, out: str | None = None) -> RunConfig:
    """Validate a run config; command-line values take precedence over config keys."""
    if not isinstance(cfg, Mapping):
        raise RateMatchError("config must be a mapping")
    _check_keys(cfg, "config", {"data", "schema", "years", "subset", "match", "genmatch",
                                "estimate", "bootstrap", "report", "out", "workers", "seed"})
    if "data" not in cfg:
        raise RateMatchError("config lacks 'data'")
    data = Path(cfg["data"])
    if not data.is_absolute():
        data = base / data
    schema = schema_from_dict(_section(cfg, "schema"))

    years = _section(cfg, "years")
    _check_keys(years, "years", {"target", "comparison"})
    target = None if years.get("target") is None else int(years["target"])
    comparison = None if years.get("comparison") is None else int(years["comparison"])
    if target is not None and target == comparison:
        raise RateMatchError("target and comparison year must differ")

    seed = int(cfg.get("seed", 0) if seed is None else seed)
    sub = _section(cfg, "subset")
    _check_keys(sub, "subset", {"n"})

    m = _section(cfg, "match")
    _check_keys(m, "match", {"methods", "replace", "ties", "n_matches", "order", "propensity",
                             "ridge", "pscore_caliper", "prefer_same_id"})
    opts = MatchOptions(replace=bool(m.get("replace", False)), ties=m.get("ties", "random"),
                        tie_seed=substream(seed, "ties"), n_matches=int(m.get("n_matches", 1)),
                        order=m.get("order", "data"), order_seed=substream(seed, "order"),
                        prefer_same_id=bool(m.get("prefer_same_id", True)))
    methods = tuple(m.get("methods", ("classic", "pscore", "complete")))
    bad = [x for x in methods if x not in MATCH_METHODS or x == "computational"]
    if bad:
        raise RateMatchError(f"unknown match method(s) {bad}; computational comes from genmatch")

    g = dict(_section(cfg, "genmatch"))
    _check_keys(g, "genmatch", {"pop_size", "max_generations", "wait_generations", "lower",
                                "upper", "starting_values"})
    if g.get("starting_values") is not None:
        g["starting_values"] = tuple(float(x) for x in g["starting_values"])
    ga = GaConfig(seed=substream(seed, "genmatch"), **g)

    e = _section(cfg, "estimate")
    _check_keys(e, "estimate", {"contrast", "coverages", "link", "methods", "multi_year"})
    contrast = Contrast(e.get("contrast", "ratio"))
    coverages = tuple(e.get("coverages", (TOTAL,)))
    missing = [c for c in coverages if c not in schema.premium_columns]
    if missing:
        raise RateMatchError(f"coverage(s) {missing} are not declared premium columns")
    link = Link(e.get("link", "log" if contrast is Contrast.RATIO else "identity"))
    est_methods = e.get("methods")
    if est_methods is not None:
        est_methods = tuple(est_methods)
        bad = [x for x in est_methods if x not in ESTIMATE_METHODS]
        if bad:
            raise RateMatchError(f"unknown estimate method(s) {bad}")
        if "regression" in est_methods and (link is Link.LOG) != (contrast is Contrast.RATIO):
            raise RateMatchError("regression needs identity link with difference or log link with ratio")

    b = _section(cfg, "bootstrap")
    _check_keys(b, "bootstrap", {"n_replicates", "ci_level", "scheme"})
    n_rep = int(b.get("n_replicates", 1000))
    boot = None
    if n_rep > 0:
        boot = BootstrapConfig(n_replicates=n_rep, ci_level=float(b.get("ci_level", 0.95)),
                               seed=substream(seed, "bootstrap"), scheme=Scheme(b.get("scheme", "pair")))

    r = _section(cfg, "report")
    _check_keys(r, "report", {"qq_points"})

    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else int(cfg.get("workers", _default_workers()))
    if workers < 1:
        raise RateMatchError("workers must be at least 1")
    out_dir = Path(out if out is not None else cfg.get("out", "out"))
    if out is None and not out_dir.is_absolute():
        out_dir = base / out_dir
    return RunConfig(
        data=data, schema=schema, target_year=target, comparison_year=comparison,
        subset_n=None if sub.get("n") is None else int(sub["n"]),
        match_opts=opts, match_methods=methods, use_propensity=bool(m.get("propensity", True)),
        ridge=float(m.get("ridge", 0.0)),
        pscore_caliper=None if m.get("pscore_caliper") is None else float(m["pscore_caliper"]),
        ga=ga, contrast=contrast, coverages=coverages, link=link, estimate_methods=est_methods,
        multi_year=bool(e.get("multi_year", False)), bootstrap=boot,
        qq_points=int(r.get("qq_points", 50)), out=out_dir, workers=workers, seed=seed)


def load_config(path: str | Path, **overrides) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise RateMatchError(f"config file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise RateMatchError(f"invalid YAML in {path}: {exc}") from None
    return parse_config(cfg or {}, path.parent, **overrides)


def _portfolio(rc: RunConfig) -> tuple[Portfolio, list]:
    pf, rejects = load_portfolio(rc.data, rc.schema)
    if rc.subset_n is not None:
        pf = subset(pf, rc.subset_n, substream(rc.seed, "subset"))
    return pf, rejects


def _years(rc: RunConfig, pf: Portfolio) -> tuple[int, int]:
    return pf.default_years(rc.target_year, rc.comparison_year)


def _weights_path(rc: RunConfig) -> Path:
    return rc.out / "weights.csv"


def _write_match_outputs(rc: RunConfig, method: str, run, before) -> bal.BalanceReport:
    after = bal.balance_report(run.portfolio, run.sample)
    run.sample.to_csv(rc.out / f"matched_{method}.csv")
    run.sample.drops_to_csv(rc.out / f"drops_{method}.csv")
    bal.write_balance_csv(before, after, rc.out / f"balance_{method}.csv")
    print(f"{method}: matched {run.sample.n_matched} of {run.sample.n_target}, "
          f"drop rate {drop_rate(run.sample):.4f}, min p {before.min_p:.4g} -> {after.min_p:.4g}")
    return after


def cmd_ingest(rc: RunConfig) -> None:
    pf, rejects = _portfolio(rc)
    rc.out.mkdir(parents=True, exist_ok=True)
    write_portfolio(pf, rc.out / "portfolio.csv", rc.schema)
    with rc.data.open(newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    write_rejects(rejects, rc.out / "rejects.csv", header)
    counts = ", ".join(f"{y}: {int((pf.years == y).sum())}" for y in pf.year_values)
    print(f"ingested {len(pf)} policies ({counts}); rejected {len(rejects)} rows")


def cmd_match(rc: RunConfig) -> None:
    pf, _ = _portfolio(rc)
    target, comparison = _years(rc, pf)
    rc.out.mkdir(parents=True, exist_ok=True)
    before = None
    for method in rc.match_methods:
        run = run_match(pf, rc.plan(method), target, comparison)
        if before is None:
            before = bal.balance_report(pf.select_years([target, comparison]), None, None,
                                        target, comparison)
        if run.model is not None:
            run.model.to_csv(rc.out / "propensity.csv")
        _write_match_outputs(rc, method, run, before)


def cmd_genmatch(rc: RunConfig) -> None:
    pf, _ = _portfolio(rc)
    target, comparison = _years(rc, pf)
    rc.out.mkdir(parents=True, exist_ok=True)
    plan = rc.plan("classic")
    two, model, ctx, target, comparison = prepare(pf, plan, target, comparison)
    if ctx is None:
        raise RateMatchError("nothing to weight: no covariate is matched approximately")
    result = optimize(two, ctx, None, rc.ga, plan.opts, rc.workers, target, comparison)
    write_weights(result.weights, ctx.names, _weights_path(rc))
    result.history_to_csv(rc.out / "ga_history.csv", ctx.names)
    if model is not None:
        model.to_csv(rc.out / "propensity.csv")
    run = run_match(pf, rc.plan("classic", result.weights.weights), target, comparison)
    before = bal.balance_report(two, None, None, target, comparison)
    print(f"genmatch: {len(result.history)} generations, {result.evaluations} evaluations")
    _write_match_outputs(rc, "computational", run, before)


def _with_ci(est: RateChangeEstimate, rc: RunConfig, fn, data) -> RateChangeEstimate:
    """Attach a percentile interval; portfolios are case-resampled, matched samples by pair."""
    if rc.bootstrap is None:
        return est
    scheme = Scheme.FULL if isinstance(data, Portfolio) else Scheme.PAIR
    cfg = replace(rc.bootstrap, scheme=scheme)
    res = bootstrap_ci(fn, data, cfg, rc.workers)
    return est.with_ci(res.ci_low, res.ci_high, cfg.ci_level)


def _estimate_methods(rc: RunConfig) -> tuple[str, ...]:
    if rc.estimate_methods is not None:
        return rc.estimate_methods
    methods = ["naive", *rc.match_methods]
    if _weights_path(rc).is_file():
        methods.append("computational")
    if (rc.link is Link.LOG) == (rc.contrast is Contrast.RATIO):
        methods.append("regression")
    methods.append("ipw")
    return tuple(methods)


def cmd_estimate(rc: RunConfig) -> None:
    pf, _ = _portfolio(rc)
    target, comparison = _years(rc, pf)
    two = pf.select_years([target, comparison])
    rc.out.mkdir(parents=True, exist_ok=True)
    methods = _estimate_methods(rc)
    estimates: list[RateChangeEstimate] = []
    for method in methods:
        if method == "naive":
            for cov in rc.coverages:
                est = estimate_naive(two, cov, rc.contrast, target, comparison)
                fn = partial(naive_point, coverage=cov, contrast=rc.contrast,
                             target_year=target, comparison_year=comparison)
                estimates.append(_with_ci(est, rc, fn, two))
        elif method == "regression":
            for cov in rc.coverages:
                fit = fit_premium_regression(two, None, rc.link, cov, target, comparison)
                est = regression_rate_change(fit, rc.contrast, cov)
                fn = partial(regression_point, link=rc.link, coverage=cov, contrast=rc.contrast,
                             target_year=target, comparison_year=comparison)
                estimates.append(_with_ci(est, rc, fn, two))
        elif method == "ipw":
            model = fit_logistic(two, None, target, comparison, ridge=rc.ridge)
            for cov in rc.coverages:
                est = estimate_ipw(two, model, cov, rc.contrast, target)
                fn = partial(ipw_point, coverage=cov, contrast=rc.contrast, target_year=target,
                             comparison_year=comparison, ridge=rc.ridge)
                estimates.append(_with_ci(est, rc, fn, two))
        else:
            weights = None
            if method == "computational":
                if not _weights_path(rc).is_file():
                    raise RateMatchError(f"missing {_weights_path(rc)}; run genmatch first")
                names = prepare(pf, rc.plan("classic"), target, comparison)[2].names
                weights = read_weights(_weights_path(rc), names).weights
            plan = rc.plan(method, weights)
            run = run_match(pf, plan, target, comparison)
            for cov in rc.coverages:
                est = estimate_matched(run.sample, run.portfolio, cov, rc.contrast, method)
                if rc.bootstrap is not None and rc.bootstrap.scheme is Scheme.FULL:
                    fn = partial(rematch_point, plan=plan, coverage=cov, contrast=rc.contrast,
                                 target_year=target, comparison_year=comparison)
                    est = _with_ci(est, rc, fn, two)
                else:
                    fn = partial(pair_point, portfolio=run.portfolio, coverage=cov, contrast=rc.contrast)
                    est = _with_ci(est, rc, fn, run.sample)
                estimates.append(est)
    write_estimates(estimates, rc.out / "estimates.csv")
    for e in estimates:
        ci = "" if e.ci_low is None else f" ({e.ci_low:.2f}, {e.ci_high:.2f})"
        print(f"{e.method} {e.coverage}: {e.point:.2f}{ci}")
    if rc.multi_year and len(pf.year_values) > 2:
        rows = []
        for method in MULTI_YEAR_METHODS:
            if method == "regression" and (rc.link is Link.LOG) != (rc.contrast is Contrast.RATIO):
                continue
            for cov in rc.coverages:
                res = multi_year(pf, target, method, rc.contrast, cov, rc.plan("classic"), rc.link)
                rows += [{"method": method, "coverage": cov, **row} for row in res.to_rows()]
        with (rc.out / "multi_year.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, ["method", "coverage", "from_year", "to_year", "point",
                                         "n_matched", "n_dropped"], lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "point": repr(float(row["point"]))})


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(x: str, digits: int = 3) -> str:
    if x in ("", None):
        return "-"
    return f"{float(x):.{digits}f}"


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    return [line(header), line(["-" * w for w in widths]), *map(line, rows)]


def _qq_csvs(rc: RunConfig, method: str, matched: list[dict]) -> None:
    pf, _ = _portfolio(rc)
    target, comparison = _years(rc, pf)
    pf = pf.select_years([target, comparison])
    ids, years = pf.ids, pf.years
    tpos = {ids[i]: i for i in np.flatnonzero(years == target)}
    cpos = {ids[i]: i for i in np.flatnonzero(years == comparison)}
    try:
        ti = np.array([tpos[r["target_id"]] for r in matched], dtype=np.int64)
        ci = np.array([cpos[r["comparison_id"]] for r in matched], dtype=np.int64)
    except KeyError as exc:
        raise RateMatchError(f"matched_{method}.csv refers to unknown policy {exc}") from None
    # one point per matched pair on both sides so identical matches give identical quantiles
    w = np.array([float(r["weight"]) for r in matched])
    t0, c0 = np.flatnonzero(years == target), np.flatnonzero(years == comparison)
    for spec in pf.specs:
        if spec.kind is Kind.CATEGORICAL or not spec.confounder:
            continue
        x = pf.numeric(spec.name)
        before = bal.qq_pairs(x[t0], x[c0], rc.qq_points)
        after = bal.qq_pairs(x[ti], x[ci], rc.qq_points, w, w)
        with (rc.out / f"qq_{method}_{spec.name}.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["probability", "target_before", "comparison_before",
                             "target_after", "comparison_after"])
            for i, ((a0, b0), (a1, b1)) in enumerate(zip(before, after)):
                writer.writerow([repr((i + 0.5) / rc.qq_points), repr(a0), repr(b0), repr(a1), repr(b1)])


def cmd_report(rc: RunConfig) -> None:
    if not rc.out.is_dir() or not any(rc.out.iterdir()):
        raise RateMatchError(f"no prior outputs in {rc.out}")
    methods = [m for m in MATCH_METHODS if (rc.out / f"balance_{m}.csv").is_file()]
    est_path = rc.out / "estimates.csv"
    missing = [] if methods else ["balance_<method>.csv"]
    if not est_path.is_file():
        missing.append("estimates.csv")
    if missing:
        raise RateMatchError(f"missing prior artifacts in {rc.out}: {', '.join(missing)}")

    lines = ["Covariate balance (p-values)", ""]
    tables = {m: _read_csv(rc.out / f"balance_{m}.csv") for m in methods}
    first = tables[methods[0]]
    rows = []
    for i, r in enumerate(first):
        if r["covariate"] == "matched number":
            rows.append(["matched number", "", r["p_before"], *(tables[m][i]["p_after"] for m in methods)])
        else:
            rows.append([r["covariate"], r["test"], _fmt(r["p_before"]),
                         *(_fmt(tables[m][i]["p_after"]) for m in methods)])
    lines += _table(["covariate", "test", "original", *methods], rows)

    lines += ["", "Drop rate", ""]
    drop_rows = []
    for m in methods:
        matched_path = rc.out / f"matched_{m}.csv"
        drops_path = rc.out / f"drops_{m}.csv"
        if not matched_path.is_file() or not drops_path.is_file():
            raise RateMatchError(f"missing prior artifacts in {rc.out}: matched/drops for {m}")
        matched = _read_csv(matched_path)
        n_matched = len({r["target_id"] for r in matched})
        n_dropped = len(_read_csv(drops_path))
        drop_rows.append([m, str(n_matched), str(n_dropped),
                          f"{n_dropped / max(n_matched + n_dropped, 1):.4f}"])
        _qq_csvs(rc, m, matched)
    lines += _table(["method", "matched", "dropped", "drop rate"], drop_rows)

    estimates = read_estimates(est_path)
    coverages = list(dict.fromkeys(e["coverage"] for e in estimates))
    by = {(e["method"], e["coverage"]): e for e in estimates}
    unit = "%" if estimates and estimates[0]["contrast"] == Contrast.RATIO.value else "difference"
    level = next((e["ci_level"] for e in estimates if e["ci_level"]), "")
    title = f"Rate change estimates ({unit}" + (f", {level} intervals)" if level else ")")
    lines += ["", title, ""]
    est_rows = []
    for method in dict.fromkeys(e["method"] for e in estimates):
        cells = []
        for cov in coverages:
            e = by.get((method, cov))
            if e is None:
                cells.append("-")
            elif e["ci_low"]:
                cells.append(f"{_fmt(e['point'], 2)} ({_fmt(e['ci_low'], 2)}, {_fmt(e['ci_high'], 2)})")
            else:
                cells.append(_fmt(e["point"], 2))
        est_rows.append([method, *cells])
    lines += _table(["method", *coverages], est_rows)
    (rc.out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


HELP = {
    "ingest": "validate the data file and write the portfolio and rejected rows",
    "match": "match target-year policies and write pairs, drops and balance",
    "genmatch": "search metric weights for balance, then match with them",
    "estimate": "rate-change estimates with bootstrap intervals",
    "report": "summary tables and QQ data from earlier outputs",
}

COMMANDS = {"ingest": cmd_ingest, "match": cmd_match, "genmatch": cmd_genmatch,
            "estimate": cmd_estimate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratematch",
                                     description="Risk-adjusted rate change by matched sampling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (env {WORKERS_ENV}; default: available cores)")
        p.add_argument("--seed", type=int, default=None, help="global seed")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config, workers=args.workers, seed=args.seed, out=args.out)
        COMMANDS[args.command](rc)
    except (RateMatchError, OSError, KeyError, TypeError, ValueError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
