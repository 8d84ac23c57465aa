"""Reference implementations used only by the tests."""

from __future__ import annotations

import itertools
from math import comb

import mpmath
import numpy as np


def ks_statistic(a, b) -> float:
    pooled = np.concatenate([a, b])
    return max(abs(np.mean(a <= x) - np.mean(b <= x)) for x in pooled)


def ks_permutation_pvalue(a, b) -> float:
    """Share of all C(N, n_a) relabellings whose KS statistic reaches the observed one."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    pooled = np.concatenate([a, b])
    N, na = pooled.size, a.size
    d_obs = ks_statistic(a, b)
    hits = 0
    for pick in itertools.combinations(range(N), na):
        mask = np.zeros(N, dtype=bool)
        mask[list(pick)] = True
        if ks_statistic(pooled[mask], pooled[~mask]) >= d_obs - 1e-12:
            hits += 1
    return hits / comb(N, na)


def welch_pvalue(a, b, dps: int = 40) -> float:
    """Two-sided Welch p-value with the t tail integrated at high precision."""
    mpmath.mp.dps = dps
    a = [mpmath.mpf(float(x)) for x in a]
    b = [mpmath.mpf(float(x)) for x in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = abs(ma - mb) / mpmath.sqrt(se2)
    nu = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    const = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    tail = mpmath.quad(lambda x: const * (1 + x * x / nu) ** (-(nu + 1) / 2), [t, mpmath.inf])
    return float(2 * tail)
