"""Second-stage inference for the average effect from per-pair summaries.

Each pair contributes an estimate d_p with sampling variance v_p (or a joint
covariance S over all pairs). The first-level estimator averages the d_p
without further assumptions. The two-level estimators add

    d_p ~ Normal(delta, tau2)

and work with the marginal likelihood Normal(delta * 1, S + tau2 * I).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, special, stats

from .core import PairSummary, summaries_to_arrays
from .errors import DegenerateVariances, InputError, TooFewPairs

Z975 = float(stats.norm.ppf(0.975))
CHI2_95 = float(stats.chi2.ppf(0.95, 1))
GRID_POINTS = 201


class Method(str, enum.Enum):
    FIRST_LEVEL_MLE = "first_level_mle"
    TWO_LEVEL_MLE = "two_level_mle"
    PROFILE_MLE = "profile_mle"
    BAYES_UNIFORM_SHRINKAGE = "bayes_uniform_shrinkage"
    PERMUTATION_EXACT = "permutation_exact"
    PERMUTATION_MC = "permutation_mc"


@dataclass(frozen=True)
class EffectEstimate:
    method: Method
    point: float | None
    se: float | None = None
    ci95: tuple[float, float] | None = None
    tau2: float | None = None
    p_value: float | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ci95 is not None and self.point is not None:
            lo, hi = self.ci95
            if not lo <= self.point <= hi:
                raise ValueError(f"interval {self.ci95} does not contain the point estimate {self.point}")
        if self.tau2 is not None and self.tau2 < 0:
            raise ValueError("tau2 must be non-negative")

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "point": self.point,
            "se": self.se,
            "ci95": None if self.ci95 is None else [self.ci95[0], self.ci95[1]],
            "tau2": self.tau2,
            "p_value": self.p_value,
        }


def as_arrays(summaries, full_cov=None) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Accept a PairSummary list or a (deltas, variances) tuple."""
    if isinstance(summaries, tuple) and len(summaries) == 2 and not isinstance(summaries[0], PairSummary):
        d = np.asarray(summaries[0], dtype=float)
        v = np.asarray(summaries[1], dtype=float)
    else:
        d, v = summaries_to_arrays(list(summaries))
    if d.shape != v.shape:
        raise InputError("deltas and variances differ in length")
    if np.any(v < 0):
        raise InputError("variances must be non-negative")
    cov = None
    if full_cov is not None:
        cov = np.asarray(full_cov, dtype=float)
        if cov.shape != (d.shape[0], d.shape[0]):
            raise InputError(f"full covariance must be {d.shape[0]}x{d.shape[0]}")
        cov = 0.5 * (cov + cov.T)
    return d, v, cov


def _require_pairs(d: np.ndarray, minimum: int = 2) -> None:
    if d.shape[0] < minimum:
        raise TooFewPairs(f"need at least {minimum} pairs, got {d.shape[0]}")


def _two_sided_normal_p(point: float, se: float) -> float:
    if se > 0:
        return float(2 * stats.norm.sf(abs(point) / se))
    return 1.0 if point == 0 else 0.0


# first level ---------------------------------------------------------------

def jackknife_se(values: np.ndarray, statistic=np.mean) -> float:
    """Delete-one jackknife standard error of ``statistic``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    loo = np.array([statistic(np.delete(values, i)) for i in range(n)])
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def first_level_mle(summaries) -> EffectEstimate:
    """Unweighted mean of the pair deltas with a delete-one-pair jackknife SE."""
    d, _, _ = as_arrays(summaries)
    _require_pairs(d)
    point = float(np.mean(d))
    se = jackknife_se(d)
    return EffectEstimate(
        Method.FIRST_LEVEL_MLE,
        point,
        se=se,
        ci95=(point - Z975 * se, point + Z975 * se),
        p_value=_two_sided_normal_p(point, se),
    )


# two-level marginal likelihood ---------------------------------------------

class MarginalLikelihood:
    """Normal(delta * 1, S + tau2 I) log-likelihood, S diagonal or full."""

    def __init__(self, deltas: np.ndarray, variances: np.ndarray, full_cov: np.ndarray | None = None):
        self.d = np.asarray(deltas, dtype=float)
        self.v = np.asarray(variances, dtype=float)
        self.full = full_cov
        self.n = self.d.shape[0]

    def _solve(self, tau2: float):
        """Return (logdet, Minv) for M = S + tau2 I, or None if M is singular."""
        if self.full is None:
            m = self.v + tau2
            if np.any(m <= 0):
                return None
            return float(np.sum(np.log(m))), None, 1.0 / m
        m = self.full + tau2 * np.eye(self.n)
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            return None
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        inv = np.linalg.inv(m)
        return logdet, 0.5 * (inv + inv.T), None

    def gls(self, tau2: float) -> tuple[float, float]:
        """Inverse-variance weighted mean at tau2 and its information 1'M^-1 1."""
        solved = self._solve(tau2)
        if solved is None:
            raise DegenerateVariances("total variance matrix is singular")
        _, inv, w = solved
        if w is not None:
            info = float(w.sum())
            return float(w @ self.d) / info, info
        ones = inv.sum(axis=1)
        info = float(ones.sum())
        return float(ones @ self.d) / info, info

    def loglik(self, delta: float, tau2: float) -> float:
        solved = self._solve(tau2)
        if solved is None:
            return -np.inf
        logdet, inv, w = solved
        r = self.d - delta
        quad = float(w @ (r * r)) if w is not None else float(r @ inv @ r)
        return -0.5 * (self.n * math.log(2 * math.pi) + logdet + quad)

    def profile_tau2(self, tau2: float) -> float:
        """Log-likelihood maximised over delta at fixed tau2."""
        solved = self._solve(tau2)
        if solved is None:
            return -np.inf
        delta, _ = self.gls(tau2)
        return self.loglik(delta, tau2)

    def information(self, delta: float, tau2: float) -> np.ndarray:
        """Observed information matrix in (delta, tau2)."""
        solved = self._solve(tau2)
        _, inv, w = solved
        r = self.d - delta
        if w is not None:
            i_dd = w.sum()
            i_dt = np.sum(w**2 * r)
            i_tt = np.sum(-0.5 * w**2 + w**3 * r**2)
        else:
            inv2 = inv @ inv
            ones = np.ones(self.n)
            i_dd = ones @ inv @ ones
            i_dt = ones @ inv2 @ r
            i_tt = -0.5 * np.trace(inv2) + r @ inv2 @ inv @ r
        return np.array([[i_dd, i_dt], [i_dt, i_tt]], dtype=float)

    def score_tau2(self, tau2: float, delta: float | None = None) -> float:
        """d loglik / d tau2 at ``delta`` (profiled over delta when None; envelope theorem)."""
        solved = self._solve(tau2)
        if solved is None:
            return np.nan
        _, inv, w = solved
        if delta is None:
            delta = self.gls(tau2)[0]
        r = self.d - delta
        if w is not None:
            return float(-0.5 * w.sum() + 0.5 * np.sum((w * r) ** 2))
        u = inv @ r
        return float(-0.5 * np.trace(inv) + 0.5 * u @ u)

    def _grid_values(self, grid: np.ndarray, delta: float | None) -> np.ndarray:
        """Log-likelihood on a tau2 grid, at ``delta`` or profiled over delta if None."""
        if self.full is not None:
            if delta is None:
                return np.array([self.profile_tau2(t) for t in grid])
            return np.array([self.loglik(delta, t) for t in grid])
        m = self.v[None, :] + grid[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = 1.0 / m
            if delta is None:
                centre = (w @ self.d) / w.sum(axis=1)
                r = self.d[None, :] - centre[:, None]
            else:
                r = np.broadcast_to(self.d - delta, m.shape)
            vals = -0.5 * (self.n * math.log(2 * math.pi) + np.log(m).sum(axis=1) + (w * r * r).sum(axis=1))
        vals[np.any(m <= 0, axis=1)] = -np.inf
        return vals

    def maximize_tau2(self, objective, upper: float, tol: float = 1e-10, delta: float | None = None) -> float:
        """Global max of ``objective`` on [0, upper]: grid scan, then a local refinement.

        ``objective`` must equal the log-likelihood at ``delta`` (or profiled
        over delta when ``delta`` is None); the grid is evaluated in bulk.
        """
        if upper <= 0:
            return 0.0
        grid = np.linspace(0.0, upper, GRID_POINTS)
        vals = self._grid_values(grid, delta)
        vals = np.where(np.isnan(vals), -np.inf, vals)
        k = int(np.argmax(vals))
        lo = grid[max(k - 1, 0)]
        hi = grid[min(k + 1, GRID_POINTS - 1)]
        best_t, best_v = float(grid[k]), float(vals[k])
        if hi > lo:
            # the likelihood is flat at the top, its derivative is not: root-find the score when
            # it brackets, otherwise fall back to bounded Brent on the likelihood itself
            lo_s, hi_s = self.score_tau2(lo, delta), self.score_tau2(hi, delta)
            if lo_s > 0 > hi_s:
                t = optimize.brentq(lambda x: self.score_tau2(x, delta), lo, hi, xtol=1e-14,
                                    rtol=4 * np.finfo(float).eps)
            else:
                t = optimize.minimize_scalar(lambda x: -objective(x), bounds=(lo, hi), method="bounded",
                                             options={"xatol": tol}).x
            v = objective(float(t))
            if v >= best_v - 1e-13 * max(1.0, abs(best_v)):
                best_t, best_v = float(t), v
        if objective(0.0) >= best_v - 1e-12 * max(1.0, abs(best_v)):
            return 0.0
        return best_t

    def tau2_upper(self) -> float:
        return 10.0 * float(np.var(self.d, ddof=1)) if self.n > 1 else 0.0

    def fit(self) -> tuple[float, float]:
        """Joint MLE of (delta, tau2) with tau2 >= 0."""
        if np.all(self.d == self.d[0]):
            if self._solve(0.0) is None:
                return float(self.d[0]), 0.0
            return self.gls(0.0)[0], 0.0
        if self._solve(0.0) is None and self.full is None and np.all(self.v == 0):
            return float(np.mean(self.d)), float(np.mean((self.d - np.mean(self.d)) ** 2))
        tau2 = self.maximize_tau2(self.profile_tau2, self.tau2_upper())
        if self._solve(tau2) is None:
            raise DegenerateVariances("no positive-definite total variance on the tau2 bracket")
        return self.gls(tau2)[0], tau2

    def profile_delta(self, delta: float) -> float:
        """Log-likelihood maximised over tau2 at fixed delta."""
        r = self.d - delta
        upper = max(float(r @ r), self.tau2_upper(), 1e-12)
        t = self.maximize_tau2(lambda t2: self.loglik(delta, t2), upper, delta=delta)
        return self.loglik(delta, t)


def _marginal(summaries, full_cov) -> MarginalLikelihood:
    d, v, cov = as_arrays(summaries, full_cov)
    _require_pairs(d)
    return MarginalLikelihood(d, v, cov)


def two_level_point(deltas: np.ndarray, variances: np.ndarray, full_cov: np.ndarray | None = None) -> float:
    """Two-level MLE point only; used as a permutation statistic."""
    return MarginalLikelihood(deltas, variances, full_cov).fit()[0]


def two_level_mle(summaries, full_cov: np.ndarray | None = None) -> EffectEstimate:
    """Joint MLE of (delta, tau2) with a Wald interval from the observed information.

    At the tau2 = 0 boundary tau2 is held fixed and the SE comes from the
    delta block of the information only.
    """
    model = _marginal(summaries, full_cov)
    delta, tau2 = model.fit()
    if model._solve(tau2) is None:
        se = 0.0
    else:
        info = model.information(delta, tau2)
        se = 1.0 / math.sqrt(info[0, 0])
        if tau2 > 0:
            try:
                cov = np.linalg.inv(info)
                if cov[0, 0] > 0 and np.all(np.linalg.eigvalsh(info) > 0):
                    se = math.sqrt(cov[0, 0])
            except np.linalg.LinAlgError:
                pass
    return EffectEstimate(
        Method.TWO_LEVEL_MLE,
        delta,
        se=se,
        ci95=(delta - Z975 * se, delta + Z975 * se),
        tau2=tau2,
        p_value=_two_sided_normal_p(delta, se),
        details={"loglik": model.profile_tau2(tau2) if model._solve(tau2) is not None else None},
    )


def _bisect(func, a: float, b: float, tol: float = 1e-8) -> float:
    fa = func(a)
    for _ in range(200):
        mid = 0.5 * (a + b)
        if abs(b - a) < tol:
            return mid
        fm = func(mid)
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
    return 0.5 * (a + b)


def profile_mle(summaries, full_cov: np.ndarray | None = None, level: float = 0.95) -> EffectEstimate:
    """Two-level MLE with a profile-likelihood-ratio interval (tau2 profiled out)."""
    model = _marginal(summaries, full_cov)
    delta, tau2 = model.fit()
    cutoff = float(stats.chi2.ppf(level, 1))
    if model._solve(tau2) is None:
        return EffectEstimate(Method.PROFILE_MLE, delta, ci95=(delta, delta), tau2=tau2)
    best = model.profile_delta(delta)
    best = max(best, model.loglik(delta, tau2))

    def excess(x):
        return 2.0 * (best - model.profile_delta(x)) - cutoff

    spread = float(np.sqrt(np.var(model.d) + np.max(np.diag(model.full) if model.full is not None else model.v)))
    step = max(spread, 1e-6)
    ends = []
    for sign in (-1.0, 1.0):
        near, far = delta, delta + sign * step
        for _ in range(200):
            if excess(far) > 0:
                break
            near, far = far, delta + 2.0 * (far - delta)
        ends.append(_bisect(excess, near, far))
    return EffectEstimate(Method.PROFILE_MLE, delta, ci95=(min(ends[0], delta), max(ends[1], delta)), tau2=tau2)


# Bayes with uniform shrinkage prior ----------------------------------------

@dataclass(frozen=True)
class BayesConfig:
    """Posterior computation settings.

    ``v0`` is the prior scale of the uniform shrinkage prior (default: the
    harmonic mean of the pair variances). The prior is uniform on the
    shrinkage factor s = v0 / (v0 + tau2); integration runs over s in
    [tail_mass, 1], i.e. tau2 up to the point where the prior tail mass is
    ``tail_mass``. ``point_mass_at_zero`` collapses the prior onto tau2 = 0.
    """

    v0: float | None = None
    tail_mass: float = 1e-6
    point_mass_at_zero: bool = False
    epsrel: float = 1e-10
    level: float = 0.95


def _quad(func, a, b, epsrel):
    # integrands are scaled to peak at 1, so a tiny absolute floor only matters where they vanish
    return integrate.quad(func, a, b, epsabs=1e-13, epsrel=epsrel, limit=400)[0]


def bayes_uniform_shrinkage(summaries, full_cov: np.ndarray | None = None,
                            config: BayesConfig | None = None) -> EffectEstimate:
    """Posterior for delta under a flat prior on delta and a uniform shrinkage prior on tau2.

    delta is integrated analytically given tau2 (normal), tau2 by adaptive
    quadrature. Reports the posterior mean and sd of delta, equal-tailed
    interval, posterior mean of tau2 and the two-sided posterior sign
    probability 2 * min(P(delta < 0), P(delta > 0)).
    """
    config = config or BayesConfig()
    model = _marginal(summaries, full_cov)
    v_diag = np.diag(model.full) if model.full is not None else model.v
    alpha = 1.0 - config.level

    if config.point_mass_at_zero:
        mean, info = model.gls(0.0)
        sd = 1.0 / math.sqrt(info)
        q = stats.norm.ppf(1 - alpha / 2)
        p = 2 * stats.norm.sf(abs(mean) / sd)
        return EffectEstimate(Method.BAYES_UNIFORM_SHRINKAGE, mean, se=sd,
                              ci95=(mean - q * sd, mean + q * sd), tau2=0.0, p_value=float(p))

    if config.v0 is not None:
        v0 = float(config.v0)
    else:
        if np.any(v_diag <= 0):
            raise DegenerateVariances("harmonic-mean prior scale needs all pair variances > 0; pass v0")
        v0 = float(len(v_diag) / np.sum(1.0 / v_diag))
    if v0 <= 0:
        raise DegenerateVariances("prior scale v0 must be positive")

    s_lo = config.tail_mass

    def tau2_of(s):
        return v0 * (1.0 - s) / s

    def log_marg(s):
        t = tau2_of(s)
        solved = model._solve(t)
        if solved is None:
            return -np.inf
        mean, info = model.gls(t)
        return model.loglik(mean, t) - 0.5 * math.log(info)

    ref = max(log_marg(s) for s in np.linspace(s_lo, 1.0, 401))
    cache: dict[float, tuple[float, float, float]] = {}

    def parts(s):
        hit = cache.get(s)
        if hit is None:
            lm = log_marg(s)
            if not np.isfinite(lm):
                hit = (0.0, 0.0, 1.0)
            else:
                mean, info = model.gls(tau2_of(s))
                hit = (math.exp(lm - ref), mean, 1.0 / info)
            cache[s] = hit
        return hit

    eps = config.epsrel
    z = _quad(lambda s: parts(s)[0], s_lo, 1.0, eps)
    post_mean = _quad(lambda s: parts(s)[0] * parts(s)[1], s_lo, 1.0, eps) / z
    second = _quad(lambda s: parts(s)[0] * (parts(s)[2] + parts(s)[1] ** 2), s_lo, 1.0, eps) / z
    tau2_mean = _quad(lambda s: parts(s)[0] * tau2_of(s), s_lo, 1.0, eps) / z
    sd = math.sqrt(max(second - post_mean**2, 0.0))

    def cdf(x):
        def f(s):
            w, m, var = parts(s)
            return w * special.ndtr((x - m) / math.sqrt(var)) if var > 0 else w * float(x >= m)
        return _quad(f, s_lo, 1.0, 1e-8) / z

    def quantile(prob):
        lo, hi = post_mean - 10 * sd - 1e-9, post_mean + 10 * sd + 1e-9
        while cdf(lo) > prob:
            lo -= 10 * sd + 1.0
        while cdf(hi) < prob:
            hi += 10 * sd + 1.0
        return optimize.brentq(lambda x: cdf(x) - prob, lo, hi, xtol=1e-10)

    lo, hi = quantile(alpha / 2), quantile(1 - alpha / 2)
    below = min(max(cdf(0.0), 0.0), 1.0)
    return EffectEstimate(
        Method.BAYES_UNIFORM_SHRINKAGE,
        post_mean,
        se=sd,
        ci95=(min(lo, post_mean), max(hi, post_mean)),
        tau2=tau2_mean,
        p_value=float(min(1.0, 2 * min(below, 1 - below))),
        details={"v0": v0},
    )


def estimate_all(summaries: Sequence[PairSummary], full_cov=None, bayes: BayesConfig | None = None):
    return [
        first_level_mle(summaries),
        two_level_mle(summaries, full_cov),
        profile_mle(summaries, full_cov),
        bayes_uniform_shrinkage(summaries, full_cov, bayes),
    ]
