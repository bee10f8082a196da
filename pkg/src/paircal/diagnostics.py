"""Within-pair covariate imbalance and the delta/variance dependence check.

Arm differences are always control minus intervention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ArmRole, Pair, PairSummary, Study
from .errors import InputError, TooFewPairs, ZeroPooledSD, ZeroVariance


def _continuous_column(pair: Pair, schema, covariate: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        j = schema.continuous.index(covariate)
    except ValueError:
        raise InputError(f"{covariate!r} is not a continuous covariate") from None
    control, intervention = pair.arms
    return control.continuous[:, j], intervention.continuous[:, j]


def effect_size_from_samples(x1: np.ndarray, x2: np.ndarray) -> float:
    """Difference in means over the pooled standard deviation."""
    n1, n2 = len(x1), len(x2)
    if n1 < 2 or n2 < 2:
        raise InputError("effect size needs at least 2 observations per arm")
    pooled = ((n1 - 1) * np.var(x1, ddof=1) + (n2 - 1) * np.var(x2, ddof=1)) / (n1 + n2 - 2)
    if pooled <= 0:
        raise ZeroPooledSD("covariate is constant in both arms")
    return float((np.mean(x1) - np.mean(x2)) / math.sqrt(pooled))


def t_statistic_from_samples(x1: np.ndarray, x2: np.ndarray, welch: bool = True) -> float:
    n1, n2 = len(x1), len(x2)
    if n1 < 2 or n2 < 2:
        raise InputError("t statistic needs at least 2 observations per arm")
    s1, s2 = np.var(x1, ddof=1), np.var(x2, ddof=1)
    if welch:
        denom = s1 / n1 + s2 / n2
    else:
        pooled = ((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2)
        denom = pooled * (1 / n1 + 1 / n2)
    if denom <= 0:
        raise ZeroVariance("covariate has zero variance in both arms")
    return float((np.mean(x1) - np.mean(x2)) / math.sqrt(denom))


def corrected_odds_ratio(a: float, b: float, c: float, d: float) -> float:
    """Odds ratio of a 2x2 table with 0.5 added to every cell."""
    return ((a + 0.5) * (d + 0.5)) / ((b + 0.5) * (c + 0.5))


def effect_size(pair: Pair, covariate: str, schema) -> float:
    return effect_size_from_samples(*_continuous_column(pair, schema, covariate))


def t_statistic(pair: Pair, covariate: str, schema, welch: bool = True) -> float:
    return t_statistic_from_samples(*_continuous_column(pair, schema, covariate), welch=welch)


def odds_ratio(pair: Pair, covariate: str, level: str, schema) -> float:
    try:
        j = schema.categorical_names.index(covariate)
    except ValueError:
        raise InputError(f"{covariate!r} is not a categorical covariate") from None
    control, intervention = pair.arms
    in1 = control.categorical[:, j].astype(str) == str(level)
    in2 = intervention.categorical[:, j].astype(str) == str(level)
    a = int(in1.sum())
    c = int(in2.sum())
    return corrected_odds_ratio(a, control.n_sampled - a, c, intervention.n_sampled - c)


@dataclass(frozen=True)
class ImbalanceRow:
    pair_id: str
    covariate: str
    level: str | None
    metric: str
    value: float | None
    note: str = ""


@dataclass(frozen=True)
class ImbalanceReport:
    rows: tuple[ImbalanceRow, ...]

    def value(self, pair_id: str, covariate: str, metric: str, level: str | None = None) -> float | None:
        for r in self.rows:
            if r.pair_id == str(pair_id) and r.covariate == covariate and r.metric == metric and r.level == level:
                return r.value
        raise KeyError((pair_id, covariate, metric, level))


def imbalance_report(study: Study, welch: bool = True) -> ImbalanceReport:
    """Effect sizes and t statistics for continuous covariates, corrected odds
    ratios for every level of every categorical covariate. Degenerate cells
    (constant covariate) are reported with value None and a note."""
    schema = study.schema
    rows = []
    for pair in study.pairs:
        for name in schema.continuous:
            for metric, func in (("effect_size", effect_size), ("t_statistic", t_statistic)):
                kwargs = {"welch": welch} if metric == "t_statistic" else {}
                try:
                    rows.append(ImbalanceRow(pair.pair_id, name, None, metric, func(pair, name, schema, **kwargs)))
                except (ZeroPooledSD, ZeroVariance) as exc:
                    rows.append(ImbalanceRow(pair.pair_id, name, None, metric, None, str(exc)))
        for name, levels in schema.categorical:
            for level in levels:
                rows.append(ImbalanceRow(pair.pair_id, name, level, "odds_ratio",
                                         odds_ratio(pair, name, level, schema)))
    return ImbalanceReport(tuple(rows))


@dataclass(frozen=True)
class DependenceCheck:
    points: tuple[tuple[float, float], ...]
    r_squared: float
    slope: float
    intercept: float
    degenerate: bool = False
    kind: str | None = field(default=None)
    pair_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "r_squared": self.r_squared,
            "slope": self.slope,
            "intercept": self.intercept,
            "degenerate": self.degenerate,
            "points": [
                {"pair_id": pid, "delta": x, "sqrt_v": y}
                for pid, (x, y) in zip(self.pair_ids or [str(i + 1) for i in range(len(self.points))], self.points)
            ],
        }


def dependence_check(summaries: Sequence[PairSummary]) -> DependenceCheck:
    """Least-squares line of sqrt(v_p) on delta_p and its R^2."""
    summaries = list(summaries)
    if len(summaries) < 3:
        raise TooFewPairs(f"dependence check needs at least 3 pairs, got {len(summaries)}")
    x = np.array([s.delta for s in summaries])
    y = np.sqrt(np.array([s.variance for s in summaries]))
    kind = summaries[0].kind.value
    sxx = float(np.sum((x - x.mean()) ** 2))
    syy = float(np.sum((y - y.mean()) ** 2))
    points = tuple((float(a), float(b)) for a, b in zip(x, y))
    ids = tuple(s.pair_id for s in summaries)
    if sxx == 0 or syy == 0:
        slope = 0.0 if sxx == 0 else float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)
        return DependenceCheck(points, 0.0, slope, float(y.mean() - slope * x.mean()), True, kind, ids)
    sxy = float(np.sum((x - x.mean()) * (y - y.mean())))
    slope = sxy / sxx
    r2 = min(max(sxy * sxy / (sxx * syy), 0.0), 1.0)
    return DependenceCheck(points, r2, slope, float(y.mean() - slope * x.mean()), False, kind, ids)
