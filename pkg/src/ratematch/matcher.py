"""Greedy nearest-neighbour matching of target-year policies to comparison-year policies."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .core import MatchMode, Portfolio, RateMatchError
from .distance import MetricContext, WeightMatrix
from .propensity import PSCORE

TIE_TOL = 1e-9

NO_EXACT = "no-exact-counterpart"
POOL_EXHAUSTED = "pool-exhausted"
CALIPER_EXHAUSTED = "caliper-exhausted"
_REASONS = {1: NO_EXACT, 2: POOL_EXHAUSTED, 3: CALIPER_EXHAUSTED}


class Ties(str, enum.Enum):
    KEEP_ALL = "keep_all"
    RANDOM = "random"


class Order(str, enum.Enum):
    DATA = "data"
    RANDOM = "random"


class Mode(str, enum.Enum):
    CLASSIC = "classic"
    PROPENSITY = "propensity"
    COMPLETE = "complete"


class AllDroppedError(RateMatchError):
    pass


@dataclass(frozen=True)
class MatchOptions:
    replace: bool = False
    ties: Ties = Ties.RANDOM
    tie_seed: int = 0
    n_matches: int = 1
    order: Order = Order.DATA
    order_seed: int = 0
    mode: Mode = Mode.CLASSIC
    # a tied comparison policy carrying the target's own id (its renewal) wins the tie
    prefer_same_id: bool = True
    propensity_column: str = PSCORE

    def __post_init__(self):
        for name, cls in (("ties", Ties), ("order", Order), ("mode", Mode)):
            object.__setattr__(self, name, cls(getattr(self, name)))
        if self.n_matches < 1:
            raise RateMatchError("n_matches must be at least 1")


@dataclass(frozen=True)
class Drop:
    target_id: str
    reason: str


@dataclass(frozen=True)
class Pair:
    target_id: str
    comparison_id: str
    weight: float
    distance: float


@dataclass(frozen=True)
class MatchedSample:
    """Weighted (target, comparison) pairs; pairs of one target are contiguous."""

    target_year: int
    comparison_year: int
    target_index: np.ndarray
    comparison_index: np.ndarray
    weight: np.ndarray
    distance: np.ndarray
    cluster: np.ndarray
    target_ids: np.ndarray
    comparison_ids: np.ndarray
    dropped: tuple[Drop, ...]
    n_target: int
    options: MatchOptions = field(default_factory=MatchOptions)
    metric: str = ""

    @property
    def n_matched(self) -> int:
        return int(self.cluster[-1] + 1) if self.cluster.size else 0

    @property
    def pairs(self) -> list[Pair]:
        return [Pair(t, c, float(w), float(d)) for t, c, w, d in
                zip(self.target_ids, self.comparison_ids, self.weight, self.distance)]

    def take_clusters(self, clusters: np.ndarray) -> "MatchedSample":
        """Sample made of the given clusters (repeats allowed), in the given order."""
        starts = np.searchsorted(self.cluster, np.arange(self.n_matched + 1))
        clusters = np.asarray(clusters, dtype=np.int64)
        counts = starts[clusters + 1] - starts[clusters]
        offsets = np.repeat(starts[clusters] - np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
        idx = offsets + np.arange(counts.sum())
        new_cluster = np.repeat(np.arange(clusters.size), counts)
        return MatchedSample(
            self.target_year, self.comparison_year, self.target_index[idx],
            self.comparison_index[idx], self.weight[idx], self.distance[idx], new_cluster,
            self.target_ids[idx], self.comparison_ids[idx], self.dropped,
            self.n_target, self.options, self.metric)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["target_id", "comparison_id", "weight", "distance"])
            for p in self.pairs:
                writer.writerow([p.target_id, p.comparison_id, repr(p.weight), repr(p.distance)])

    def drops_to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["target_id", "reason"])
            for d in self.dropped:
                writer.writerow([d.target_id, d.reason])


@njit(cache=True)
def _greedy(order, tgt_group, grp_offsets, grp_members, Z, w, C, cal_thr, same_pos, prio,
            keep_all, n_matches, replace, tol, avail):
    out_t = [np.int64(0) for _ in range(0)]
    out_c = [np.int64(0) for _ in range(0)]
    out_d = [np.float64(0.0) for _ in range(0)]
    status = np.zeros(order.size, dtype=np.int64)
    k = Z.shape[1]
    nc = C.shape[1]
    for oi in range(order.size):
        t = order[oi]
        g = tgt_group[oi]
        if g < 0 or grp_offsets[g + 1] == grp_offsets[g]:
            status[oi] = 1
            continue
        m = grp_offsets[g + 1] - grp_offsets[g]
        cand = np.empty(m, dtype=np.int64)
        dist = np.empty(m)
        nav = 0
        ncand = 0
        for r in range(grp_offsets[g], grp_offsets[g + 1]):
            j = grp_members[r]
            if not avail[j]:
                continue
            nav += 1
            ok = True
            for c in range(nc):
                if abs(C[j, c] - C[t, c]) > cal_thr[c]:
                    ok = False
                    break
            if not ok:
                continue
            s = 0.0
            for q in range(k):
                diff = Z[j, q] - Z[t, q]
                s += w[q] * diff * diff
            cand[ncand] = j
            dist[ncand] = np.sqrt(s)
            ncand += 1
        if nav == 0:
            status[oi] = 2
            continue
        if ncand == 0:
            status[oi] = 3
            continue
        used = np.zeros(ncand, dtype=np.bool_)
        chosen = [np.int64(0) for _ in range(0)]
        need = n_matches
        dmin = dist[0]
        for r in range(ncand):
            if dist[r] < dmin:
                dmin = dist[r]
        if same_pos[oi] >= 0:
            for r in range(ncand):
                if cand[r] == same_pos[oi] and dist[r] <= dmin + tol * (1.0 + dmin):
                    used[r] = True
                    chosen.append(r)
                    need -= 1
                    break
        while need > 0 and len(chosen) < ncand:
            if keep_all:
                rem = np.empty(ncand - len(chosen))
                q = 0
                for r in range(ncand):
                    if not used[r]:
                        rem[q] = dist[r]
                        q += 1
                rem.sort()
                thr = rem[min(need, rem.size) - 1]
                thr = thr + tol * (1.0 + thr)
                for r in range(ncand):
                    if not used[r] and dist[r] <= thr:
                        used[r] = True
                        chosen.append(r)
                need = 0
            else:
                best = -1
                bd = np.inf
                for r in range(ncand):
                    if not used[r] and dist[r] < bd:
                        bd = dist[r]
                thr = bd + tol * (1.0 + bd)
                for r in range(ncand):
                    if not used[r] and dist[r] <= thr:
                        if best < 0 or prio[cand[r]] < prio[cand[best]]:
                            best = r
                used[best] = True
                chosen.append(best)
                need -= 1
        for r in chosen:
            out_t.append(t)
            out_c.append(cand[r])
            out_d.append(dist[r])
            if not replace:
                avail[cand[r]] = False
        status[oi] = -len(chosen)
    return np.array(out_t), np.array(out_c), np.array(out_d), status


def _exact_keys(portfolio: Portfolio, names: list[str]) -> list[tuple]:
    if not names:
        return [()] * len(portfolio)
    return list(zip(*(portfolio.values(n).tolist() for n in names)))


def _key_names(portfolio: Portfolio, opts: MatchOptions) -> list[str]:
    if opts.mode is Mode.COMPLETE:
        return [s.name for s in portfolio.specs
                if s.match_mode is not MatchMode.IGNORE
                and (s.confounder or s.match_mode is MatchMode.EXACT)]
    return [s.name for s in portfolio.specs if s.match_mode is MatchMode.EXACT]


def match_portfolio(portfolio: Portfolio, ctx: MetricContext | None, w: WeightMatrix | None,
                    opts: MatchOptions = MatchOptions(), target_year: int | None = None,
                    comparison_year: int | None = None) -> MatchedSample:
    """Match every target-year policy to its nearest admissible comparison policies.

    ``ctx`` may be ``None`` when nothing is matched approximately (all admissible
    candidates are then at distance zero). Raises ``AllDroppedError`` if no target
    finds a match.
    """
    target_year, comparison_year = portfolio.default_years(target_year, comparison_year)
    years = portfolio.years
    targets = np.flatnonzero(years == target_year)
    pool = np.flatnonzero(years == comparison_year)
    if targets.size == 0 or pool.size == 0:
        raise RateMatchError("target and comparison years must both be nonempty")
    n = len(portfolio)

    # distance coordinates and caliper columns per mode
    if opts.mode is Mode.COMPLETE:
        Z, wv = np.zeros((n, 1)), np.ones(1)
        C, thr = np.zeros((n, 0)), np.zeros(0)
        metric = "complete (all covariates exact)"
    elif opts.mode is Mode.PROPENSITY:
        col = opts.propensity_column
        Z, wv = portfolio.numeric(col)[:, None].astype(float), np.ones(1)
        spec = portfolio.spec(col)
        if spec.caliper is not None:
            sd = float(np.std(Z[:, 0], ddof=1))
            C, thr = Z.copy(), np.array([spec.caliper * sd])
        else:
            C, thr = np.zeros((n, 0)), np.zeros(0)
        metric = f"|difference in {col}|"
    elif ctx is None:
        Z, wv = np.zeros((n, 1)), np.ones(1)
        C, thr = np.zeros((n, 0)), np.zeros(0)
        metric = "exact constraints only"
    else:
        if w is None:
            w = WeightMatrix.identity(ctx.k)
        if len(w) != ctx.k:
            raise RateMatchError(f"weight vector has {len(w)} entries, metric has {ctx.k}")
        X = ctx.coordinates(portfolio)
        Z, wv = ctx.standardize(X), w.weights
        has_cal = ~np.isnan(ctx.calipers)
        C = np.ascontiguousarray(X[:, has_cal])
        thr = ctx.calipers[has_cal] * ctx.sd[has_cal] * (1 + 1e-12)
        metric = "mahalanobis" if np.all(wv == 1) else "weighted mahalanobis " + repr(wv.tolist())

    keys = _exact_keys(portfolio, _key_names(portfolio, opts))
    groups: dict[tuple, list[int]] = {}
    for j in pool:
        groups.setdefault(keys[j], []).append(int(j))
    group_ids = {key: g for g, key in enumerate(groups)}
    offsets = np.zeros(len(groups) + 1, dtype=np.int64)
    members = np.empty(pool.size, dtype=np.int64)
    pos = 0
    for g, key in enumerate(groups):
        m = groups[key]
        members[pos:pos + len(m)] = m
        pos += len(m)
        offsets[g + 1] = pos

    if opts.order is Order.RANDOM:
        order = np.random.default_rng(opts.order_seed).permutation(targets)
    else:
        order = targets.copy()
    tgt_group = np.array([group_ids.get(keys[t], -1) for t in order], dtype=np.int64)

    ids = portfolio.ids
    pool_by_id = {ids[j]: int(j) for j in pool}
    if opts.prefer_same_id:
        same = np.array([pool_by_id.get(ids[t], -1) for t in order], dtype=np.int64)
    else:
        same = np.full(order.size, -1, dtype=np.int64)
    prio = np.zeros(n, dtype=np.int64)
    prio[pool] = np.random.default_rng(opts.tie_seed).permutation(pool.size)

    avail = np.ones(n, dtype=np.bool_)
    out_t, out_c, out_d, status = _greedy(
        order.astype(np.int64), tgt_group, offsets, members, np.ascontiguousarray(Z, dtype=float),
        np.asarray(wv, dtype=float), np.ascontiguousarray(C, dtype=float), np.asarray(thr, dtype=float),
        same, prio, opts.ties is Ties.KEEP_ALL, int(opts.n_matches), bool(opts.replace), TIE_TOL, avail)

    dropped = tuple(Drop(str(ids[order[i]]), _REASONS[int(s)]) for i, s in enumerate(status) if s > 0)
    if out_t.size == 0:
        raise AllDroppedError(f"all {targets.size} target policies were dropped")
    counts = -status[status < 0]
    cluster = np.repeat(np.arange(counts.size), counts)
    weight = np.repeat(1.0 / counts, counts)
    return MatchedSample(
        target_year=target_year, comparison_year=comparison_year,
        target_index=out_t.astype(np.int64), comparison_index=out_c.astype(np.int64),
        weight=weight, distance=out_d.astype(float), cluster=cluster,
        target_ids=ids[out_t], comparison_ids=ids[out_c], dropped=dropped,
        n_target=int(targets.size), options=opts, metric=metric)


def complete_match(portfolio: Portfolio, opts: MatchOptions = MatchOptions(),
                   target_year: int | None = None, comparison_year: int | None = None) -> MatchedSample:
    """Match only on identical terms and conditions (every non-ignored covariate exact)."""
    opts = MatchOptions(**{**opts.__dict__, "mode": Mode.COMPLETE})
    return match_portfolio(portfolio, None, None, opts, target_year, comparison_year)


def drop_rate(sample: MatchedSample) -> float:
    return len(sample.dropped) / (len(sample.dropped) + sample.n_matched)
