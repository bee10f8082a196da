"""Covariate-calibrated pair/arm means and their delta-method covariance.

For each pair the covariates of all sampled patients of both arms form a
pooled empirical distribution, each arm's patients weighted so that the arm's
total mass is its share of patients served. The fitted outcome model of an
arm is averaged over that pooled distribution, so both arms of a pair are
compared on the same covariate mix. The pooled weights are treated as fixed
when propagating coefficient uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ArmRole, Pair, PairSummary, Study, SummaryKind
from .glm import CoefficientFit


@dataclass(frozen=True, eq=False)
class PooledCovariateDistribution:
    pair_id: str
    continuous: np.ndarray
    categorical: np.ndarray
    weights: np.ndarray
    source_role: np.ndarray

    def arm_mass(self, role: ArmRole) -> float:
        return float(self.weights[self.source_role == int(role)].sum())


def pooled_distribution(pair: Pair) -> PooledCovariateDistribution:
    """Support = every sampled patient of the pair, control patients first."""
    control, intervention = pair.arms
    served = [control.n_served or control.n_sampled, intervention.n_served or intervention.n_sampled]
    total = float(sum(served))
    weights = np.concatenate([
        np.full(arm.n_sampled, (n_served / arm.n_sampled) / total)
        for arm, n_served in zip((control, intervention), served)
    ])
    return PooledCovariateDistribution(
        pair_id=pair.pair_id,
        continuous=np.vstack([control.continuous, intervention.continuous]),
        categorical=np.vstack([control.categorical, intervention.categorical]),
        weights=weights,
        source_role=np.concatenate([np.full(control.n_sampled, 1), np.full(intervention.n_sampled, 2)]),
    )


def _support_rows(pair: Pair, role: ArmRole, fit: CoefficientFit, pooled: PooledCovariateDistribution):
    z = fit.design.encode(pooled.continuous, pooled.categorical)
    return fit.design.rows_for(pair.pair_id, role, z)


def calibrated_mean(
    pair: Pair,
    role: ArmRole,
    fit: CoefficientFit,
    pooled: PooledCovariateDistribution | None = None,
) -> float:
    """Weighted average of the arm's fitted mean function over the pooled covariates."""
    pooled = pooled or pooled_distribution(pair)
    rows = _support_rows(pair, ArmRole.parse(role), fit, pooled)
    return float(pooled.weights @ fit.link.inverse(rows @ fit.theta))


def calibration_gradient(
    pair: Pair,
    role: ArmRole,
    fit: CoefficientFit,
    pooled: PooledCovariateDistribution | None = None,
) -> np.ndarray:
    """Gradient of ``calibrated_mean`` with respect to the coefficient vector."""
    pooled = pooled or pooled_distribution(pair)
    rows = _support_rows(pair, ArmRole.parse(role), fit, pooled)
    slope = fit.link.inverse_derivative(rows @ fit.theta)
    return (pooled.weights * slope) @ rows


@dataclass(frozen=True, eq=False)
class CalibratedEstimates:
    """Calibrated means for all pairs.

    ``mu[i, c-1]`` is the calibrated mean of arm c in the i-th pair, and
    ``covariance`` is indexed by ``2*i + (c-1)``.
    """

    pair_ids: tuple[str, ...]
    mu: np.ndarray
    covariance: np.ndarray
    deltas: tuple[PairSummary, ...]
    delta_covariance: np.ndarray

    @property
    def delta_values(self) -> np.ndarray:
        return np.array([s.delta for s in self.deltas])

    def affine(self, scale: float, shift: float) -> "CalibratedEstimates":
        """Map means through y -> scale*y + shift (e.g. undo outcome rescaling)."""
        mu = scale * self.mu + shift
        cov = scale**2 * self.covariance
        dcov = scale**2 * self.delta_covariance
        return _assemble(self.pair_ids, mu, cov, dcov)


def contrast_matrix(n_pairs: int) -> np.ndarray:
    """C with C @ vec(mu) = control minus intervention, pair by pair."""
    c = np.zeros((n_pairs, 2 * n_pairs))
    idx = np.arange(n_pairs)
    c[idx, 2 * idx] = 1.0
    c[idx, 2 * idx + 1] = -1.0
    return c


def _assemble(pair_ids, mu, cov, dcov) -> CalibratedEstimates:
    deltas = tuple(
        PairSummary(pid, float(mu[i, 0] - mu[i, 1]), max(float(dcov[i, i]), 0.0), SummaryKind.CALIBRATED)
        for i, pid in enumerate(pair_ids)
    )
    return CalibratedEstimates(tuple(pair_ids), mu, cov, deltas, dcov)


def calibrate_study(study: Study, fit: CoefficientFit) -> CalibratedEstimates:
    n = study.n_pairs
    mu = np.zeros((n, 2))
    jac = np.zeros((2 * n, fit.theta.shape[0]))
    for i, pair in enumerate(study.pairs):
        pooled = pooled_distribution(pair)
        for role in ArmRole:
            mu[i, role - 1] = calibrated_mean(pair, role, fit, pooled)
            jac[2 * i + role - 1] = calibration_gradient(pair, role, fit, pooled)
    cov = jac @ fit.covariance @ jac.T
    cov = 0.5 * (cov + cov.T)
    c = contrast_matrix(n)
    dcov = c @ cov @ c.T
    dcov = 0.5 * (dcov + dcov.T)
    return _assemble(study.pair_ids, mu, cov, dcov)
