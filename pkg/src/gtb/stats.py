"""Welch two-sample t-tests over per-seed metric samples."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

P_FLOOR = 1e-12


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float
    floored: bool = False


def welch_ttest(a, b) -> TTestResult:
    """Two-sided Welch t-test.

    When both groups have zero variance the statistic is 0 (p = 1) for equal
    means and infinite otherwise; p-values are never reported below
    ``P_FLOOR``, and ``floored`` marks results that hit the floor.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise InsufficientSamples("need at least 2 samples per group")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if va == 0 and vb == 0:
        if diff == 0:
            return TTestResult(0.0, float(a.size + b.size - 2), 1.0)
        return TTestResult(math.copysign(math.inf, diff), float(a.size + b.size - 2), P_FLOOR, True)
    na, nb = a.size, b.size
    res = stats.ttest_ind_from_stats(a.mean(), math.sqrt(va), na, b.mean(), math.sqrt(vb), nb, equal_var=False)
    qa, qb = va / na, vb / nb
    df = (qa + qb) ** 2 / (qa**2 / (na - 1) + qb**2 / (nb - 1))
    p = float(res.pvalue)
    floored = p < P_FLOOR
    return TTestResult(float(res.statistic), float(df), max(p, P_FLOOR), floored)


def ttest_compare(groups: dict[str, dict[str, list[float]]]) -> list[dict]:
    """Welch tests for every metric shared by every pair of groups."""
    rows = []
    for (ga, ma), (gb, mb) in itertools.combinations(groups.items(), 2):
        for metric in sorted(set(ma) & set(mb)):
            r = welch_ttest(ma[metric], mb[metric])
            rows.append({"metric": metric, "group_a": ga, "group_b": gb,
                         "mean_a": float(np.mean(ma[metric])), "mean_b": float(np.mean(mb[metric])),
                         "t": r.t, "df": r.df, "p": r.p, "p_floored": r.floored})
    return rows
