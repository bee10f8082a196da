"""Two-type pair population under which the meta-analytic MLE is inconsistent.

Every pair has crude estimand +m or -m with probability 1/2 each, where m is
half-standard-normal, so the estimands average to zero with variance 1. The
sign is tied to the sampling variance: the "type 1" manifestation has
estimand -m and variance 2/n, the "type 2" manifestation +m and variance
(1 + sigma2)/n. The inverse-variance weighted mean with weights
1 / (1 + v_p) then converges to a non-zero value whenever sigma2 != 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._parallel import map_ordered
from .errors import ConfigError

HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)
SHARD = 50_000


@dataclass(frozen=True)
class Result1Config:
    sigma2: float
    n_per_arm: int
    num_pairs: int = 100_000
    seed: int = 0
    tau2_known: float = 1.0
    type1_sign: int = -1
    jackknife_blocks: int = 100

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ConfigError("sigma2 must be positive")
        if self.n_per_arm < 1:
            raise ConfigError("n_per_arm must be at least 1")
        if self.type1_sign not in (-1, 1):
            raise ConfigError("type1_sign must be -1 or +1")

    @property
    def w1(self) -> float:
        return 2.0 / self.n_per_arm

    @property
    def w2(self) -> float:
        return (1.0 + self.sigma2) / self.n_per_arm


def plim_mle(config: Result1Config) -> float:
    """Closed-form probability limit E(u d) / E(u) with u = 1 / (V + v)."""
    big_v = config.tau2_known
    u1 = 1.0 / (big_v + config.w1)
    u2 = 1.0 / (big_v + config.w2)
    # type 1 contributes type1_sign * m, type 2 the opposite sign
    e_ud = 0.5 * HALF_NORMAL_MEAN * (-config.type1_sign) * (u2 - u1)
    e_u = 0.5 * (u1 + u2)
    return e_ud / e_u


@dataclass(frozen=True)
class SimulationResult:
    estimate: float
    mc_se: float
    unweighted_mean: float
    unweighted_se: float
    num_pairs: int


def _draw(config: Result1Config, stream: np.random.SeedSequence, size: int):
    rng = np.random.default_rng(stream)
    m = np.abs(rng.standard_normal(size))
    type2 = rng.random(size) < 0.5
    sign = np.where(type2, -config.type1_sign, config.type1_sign)
    v = np.where(type2, config.w2, config.w1)
    d_hat = sign * m + np.sqrt(v) * rng.standard_normal(size)
    return d_hat, 1.0 / (config.tau2_known + v)


def simulate_draws(config: Result1Config, workers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Simulated (d_hat, u) for every pair; deterministic for a given seed."""
    n_shards = math.ceil(config.num_pairs / SHARD)
    streams = np.random.SeedSequence(config.seed).spawn(n_shards)
    sizes = [min(SHARD, config.num_pairs - k * SHARD) for k in range(n_shards)]
    parts = map_ordered(lambda k: _draw(config, streams[k], sizes[k]), range(n_shards), workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _block_jackknife_se(num: np.ndarray, den: np.ndarray, blocks: int) -> float:
    """Delete-one-block jackknife SE of sum(num) / sum(den)."""
    edges = np.linspace(0, num.shape[0], blocks + 1).astype(int)
    bn = np.add.reduceat(num, edges[:-1])
    bd = np.add.reduceat(den, edges[:-1])
    loo = (bn.sum() - bn) / (bd.sum() - bd)
    g = blocks
    return float(math.sqrt((g - 1) / g * np.sum((loo - loo.mean()) ** 2)))


def simulate_mle(config: Result1Config, workers: int | None = None) -> SimulationResult:
    if config.num_pairs < 100:
        raise ConfigError("num_pairs must be at least 100")
    d_hat, u = simulate_draws(config, workers)
    blocks = min(config.jackknife_blocks, config.num_pairs)
    estimate = float(np.sum(u * d_hat) / np.sum(u))
    mc_se = _block_jackknife_se(u * d_hat, u, blocks)
    return SimulationResult(
        estimate=estimate,
        mc_se=mc_se,
        unweighted_mean=float(np.mean(d_hat)),
        unweighted_se=float(np.std(d_hat, ddof=1) / math.sqrt(d_hat.shape[0])),
        num_pairs=config.num_pairs,
    )
