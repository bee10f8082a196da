"""Randomization tests that re-assign treatment labels within pairs.

Swapping the labels of one pair negates its delta, so the randomization
distribution of a statistic is obtained by flipping the signs of the pair
deltas. Exact mode enumerates all 2^N sign vectors; Monte Carlo mode samples
them. Two-sided p-values count sign vectors whose |statistic| is at least the
observed one, ties included.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._parallel import map_ordered
from .calibration import calibrate_study
from .core import Study
from .errors import ConfigError, InputError, TooManyPairs
from .estimators import as_arrays, two_level_point
from .glm import build_design, fit

MAX_EXACT_PAIRS = 25
EXACT_CHUNK = 1 << 16
MC_SHARD = 10_000
TIE_RTOL = 1e-9


class Statistic(str, enum.Enum):
    MEAN = "mean"
    TWO_LEVEL_MLE = "two_level_mle"
    CALIBRATED_MEAN = "calibrated_mean"


class Mode(str, enum.Enum):
    EXACT = "exact"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class PermutationResult:
    p_value: float
    n_permutations: int
    mode: Mode
    statistic_observed: float
    n_extreme: int
    statistic: Statistic = Statistic.MEAN
    statistic_distribution: tuple[float, ...] | None = None

    @property
    def p_fraction(self) -> Fraction:
        if self.mode is Mode.EXACT:
            return Fraction(self.n_extreme, self.n_permutations)
        return Fraction(self.n_extreme + 1, self.n_permutations + 1)

    def to_dict(self) -> dict:
        return {
            "p_value": self.p_value,
            "n_permutations": self.n_permutations,
            "mode": self.mode.value,
            "statistic": self.statistic.value,
            "statistic_observed": self.statistic_observed,
            "n_extreme": self.n_extreme,
        }


def _signs_for_range(start: int, stop: int, n: int) -> np.ndarray:
    """Sign vectors for enumeration indices [start, stop): bit j set -> pair j flipped."""
    idx = np.arange(start, stop, dtype=np.int64)[:, None]
    bits = (idx >> np.arange(n, dtype=np.int64)) & 1
    return 1.0 - 2.0 * bits


class _Evaluator:
    def __init__(self, statistic: Statistic, deltas, variances, full_cov):
        self.statistic = Statistic(statistic)
        self.d = deltas
        self.v = variances
        self.cov = full_cov

    def __call__(self, signs: np.ndarray) -> np.ndarray:
        flipped = signs * self.d
        if self.statistic is not Statistic.TWO_LEVEL_MLE:
            return flipped.mean(axis=1)
        out = np.empty(signs.shape[0])
        for i, (eps, row) in enumerate(zip(signs, flipped)):
            cov = None if self.cov is None else self.cov * np.outer(eps, eps)
            out[i] = two_level_point(row, self.v, cov)
        return out


def _count_extreme(values: np.ndarray, observed: float, scale: float) -> int:
    return int(np.count_nonzero(np.abs(values) >= abs(observed) - TIE_RTOL * scale))


def _prepare(deltas, statistic, variances, full_cov):
    statistic = Statistic(statistic)
    d = np.asarray(deltas, dtype=float)
    if statistic is Statistic.TWO_LEVEL_MLE and variances is None and full_cov is None:
        raise ConfigError("the two-level statistic needs pair variances")
    v = np.zeros_like(d) if variances is None else np.asarray(variances, dtype=float)
    if full_cov is not None and variances is None:
        v = np.diag(np.asarray(full_cov, dtype=float)).copy()
    d, v, cov = as_arrays((d, v), full_cov)
    if d.shape[0] < 1:
        raise InputError("need at least one pair")
    evaluator = _Evaluator(statistic, d, v, cov)
    observed = float(evaluator(np.ones((1, d.shape[0])))[0])
    scale = max(abs(observed), float(np.max(np.abs(d))), 1e-300)
    return statistic, d, evaluator, observed, scale


def permute_exact(
    deltas,
    statistic: Statistic | str = Statistic.MEAN,
    variances=None,
    full_cov=None,
    keep_distribution: bool = False,
    workers: int | None = None,
) -> PermutationResult:
    statistic, d, evaluator, observed, scale = _prepare(deltas, statistic, variances, full_cov)
    n = d.shape[0]
    if n > MAX_EXACT_PAIRS:
        raise TooManyPairs(f"{n} pairs exceeds the exact-enumeration cap of {MAX_EXACT_PAIRS}; use Monte Carlo mode")
    total = 1 << n
    chunk = EXACT_CHUNK if statistic is not Statistic.TWO_LEVEL_MLE else 256
    ranges = [(s, min(s + chunk, total)) for s in range(0, total, chunk)]

    def run(bounds):
        values = evaluator(_signs_for_range(bounds[0], bounds[1], n))
        return _count_extreme(values, observed, scale), (values if keep_distribution else None)

    parts = map_ordered(run, ranges, workers)
    extreme = sum(c for c, _ in parts)
    dist = tuple(float(x) for _, vals in parts for x in vals) if keep_distribution else None
    return PermutationResult(extreme / total, total, Mode.EXACT, observed, extreme, statistic, dist)


def permute_monte_carlo(
    deltas,
    statistic: Statistic | str = Statistic.MEAN,
    n_draws: int = 10_000,
    seed: int = 0,
    variances=None,
    full_cov=None,
    keep_distribution: bool = False,
    workers: int | None = None,
) -> PermutationResult:
    """Sampled sign flips with the add-one p-value (b + 1) / (m + 1).

    Draws are split into fixed shards of ``MC_SHARD`` with one child stream of
    ``SeedSequence(seed)`` each, so the result does not depend on threading.
    """
    if n_draws < 1000:
        raise ConfigError("Monte Carlo permutation needs n_draws >= 1000")
    statistic, d, evaluator, observed, scale = _prepare(deltas, statistic, variances, full_cov)
    n = d.shape[0]
    n_shards = math.ceil(n_draws / MC_SHARD)
    streams = np.random.SeedSequence(seed).spawn(n_shards)
    sizes = [min(MC_SHARD, n_draws - k * MC_SHARD) for k in range(n_shards)]

    def run(k):
        rng = np.random.default_rng(streams[k])
        signs = 1.0 - 2.0 * rng.integers(0, 2, size=(sizes[k], n))
        values = evaluator(signs)
        return _count_extreme(values, observed, scale), (values if keep_distribution else None)

    parts = map_ordered(run, range(n_shards), workers)
    extreme = sum(c for c, _ in parts)
    dist = tuple(float(x) for _, vals in parts for x in vals) if keep_distribution else None
    return PermutationResult((extreme + 1) / (n_draws + 1), n_draws, Mode.MONTE_CARLO, observed, extreme,
                             statistic, dist)


def refit_statistic(study: Study, link="identity", include_covariates: bool = True,
                    arm_specific_slopes: bool = False, cov_type="HC0") -> float:
    """Mean calibrated delta after fitting and calibrating ``study``."""
    design = build_design(study, include_covariates=include_covariates, arm_specific_slopes=arm_specific_slopes)
    estimates = calibrate_study(study, fit(design, link=link, cov_type=cov_type))
    return float(np.mean(estimates.delta_values))


def permute_refit(
    study: Study,
    mode: Mode | str = Mode.EXACT,
    n_draws: int = 10_000,
    seed: int = 0,
    workers: int | None = None,
    **model_options,
) -> PermutationResult:
    """Label-swap permutation at patient level: swap, refit, recalibrate for every sign vector."""
    mode = Mode(mode)
    n = study.n_pairs
    ids = study.pair_ids
    observed = refit_statistic(study, **model_options)

    def stat_for(signs):
        flipped = [pid for pid, s in zip(ids, signs) if s < 0]
        return refit_statistic(study.swap_labels(flipped), **model_options)

    if mode is Mode.EXACT:
        if n > MAX_EXACT_PAIRS:
            raise TooManyPairs(f"{n} pairs exceeds the exact-enumeration cap of {MAX_EXACT_PAIRS}")
        sign_rows = _signs_for_range(0, 1 << n, n)
    else:
        if n_draws < 1000:
            raise ConfigError("Monte Carlo permutation needs n_draws >= 1000")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        sign_rows = 1.0 - 2.0 * rng.integers(0, 2, size=(n_draws, n))
    values = np.array(map_ordered(stat_for, list(sign_rows), workers))
    scale = max(abs(observed), float(np.max(np.abs(values))), 1e-300)
    extreme = _count_extreme(values, observed, scale)
    m = values.shape[0]
    p = extreme / m if mode is Mode.EXACT else (extreme + 1) / (m + 1)
    return PermutationResult(p, m, mode, observed, extreme, Statistic.CALIBRATED_MEAN, tuple(values.tolist()))
