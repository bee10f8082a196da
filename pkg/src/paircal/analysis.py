"""Analysis pipeline: fit -> calibrate -> estimators -> permutation -> diagnostics."""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import __version__
from .calibration import calibrate_study
from .core import Study, SummaryKind, arm_mean_and_variance, crude_summaries, summaries_to_arrays
from .diagnostics import dependence_check, imbalance_report
from .errors import ConfigError, TooFewPairs
from .estimators import (
    BayesConfig,
    bayes_uniform_shrinkage,
    first_level_mle,
    profile_mle,
    two_level_mle,
)
from .glm import CovType, LinkFunction, build_design, fit, rescale_outcomes
from .io import SummaryData
from .permutation import Statistic, permute_exact, permute_monte_carlo, permute_refit

logger = logging.getLogger(__name__)


class InputMode(str, enum.Enum):
    PATIENT = "patient"
    SUMMARY = "summary"


class CovarianceMode(str, enum.Enum):
    DIAGONAL = "diagonal"
    FULL = "full"


ESTIMATORS = ("first_level", "two_level", "profile", "bayes", "permutation_exact", "permutation_mc")
DEFAULT_ESTIMATORS = ("first_level", "two_level", "profile", "bayes", "permutation_exact")


@dataclass(frozen=True)
class AnalysisConfig:
    mode: InputMode = InputMode.SUMMARY
    calibration: bool = False
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS
    link: LinkFunction = LinkFunction.IDENTITY
    covariance_mode: CovarianceMode = CovarianceMode.DIAGONAL
    sandwich: CovType = CovType.HC0
    seed: int | None = None
    mc_draws: int = 10_000
    permutation_statistics: tuple[str, ...] = ("mean", "two_level_mle")
    permutation_refit: bool = False
    arm_specific_slopes: bool = False
    outcome_range: tuple[float, float] | None = None
    welch: bool = True
    bayes_v0: float | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        try:
            set_(self, "mode", InputMode(self.mode))
            set_(self, "link", LinkFunction(self.link))
            set_(self, "covariance_mode", CovarianceMode(self.covariance_mode))
            set_(self, "sandwich", CovType(self.sandwich))
            stats = tuple(Statistic(s).value for s in self.permutation_statistics)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        set_(self, "permutation_statistics", stats)
        ests = tuple(dict.fromkeys(self.estimators))
        unknown = [e for e in ests if e not in ESTIMATORS]
        if unknown:
            raise ConfigError(f"unknown estimator(s) {unknown}; choose from {list(ESTIMATORS)}")
        set_(self, "estimators", tuple(e for e in ESTIMATORS if e in ests))
        if self.outcome_range is not None:
            set_(self, "outcome_range", (float(self.outcome_range[0]), float(self.outcome_range[1])))
        if self.calibration and self.mode is not InputMode.PATIENT:
            raise ConfigError("calibration requires patient-level input")
        if "permutation_mc" in self.estimators and self.seed is None:
            raise ConfigError("Monte Carlo permutation requires a seed")
        if self.mc_draws < 1000:
            raise ConfigError("mc_draws must be at least 1000")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AnalysisConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}")
        kwargs = dict(data)
        for key in ("estimators", "permutation_statistics", "outcome_range"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def replace(self, **changes) -> "AnalysisConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


@dataclass
class AnalysisReport:
    pair_table: list[dict]
    effect_table: list[dict]
    imbalance_table: list[dict]
    dependence: list[dict]
    coefficients: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pair_table": self.pair_table,
            "effect_table": self.effect_table,
            "imbalance_table": self.imbalance_table,
            "dependence": self.dependence,
            "coefficients": self.coefficients,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnalysisReport":
        return cls(
            pair_table=data["pair_table"],
            effect_table=data["effect_table"],
            imbalance_table=data["imbalance_table"],
            dependence=data["dependence"],
            coefficients=data.get("coefficients", []),
            provenance=data.get("provenance", {}),
        )

    def effect(self, kind: str, method: str, statistic: str | None = None) -> dict:
        for row in self.effect_table:
            if row["kind"] == kind and row["method"] == method and (statistic is None or row["statistic"] == statistic):
                return row
        raise KeyError((kind, method, statistic))


def _effect_row(kind: str, estimate) -> dict:
    lo, hi = estimate.ci95 if estimate.ci95 is not None else (None, None)
    return {
        "kind": kind,
        "method": estimate.method.value,
        "statistic": None,
        "estimate": estimate.point,
        "ci_low": lo,
        "ci_high": hi,
        "se": estimate.se,
        "tau2": estimate.tau2,
        "p_value": estimate.p_value,
        "n_permutations": None,
    }


def _permutation_row(kind: str, method: str, result) -> dict:
    return {
        "kind": kind,
        "method": method,
        "statistic": result.statistic.value,
        "estimate": None,
        "ci_low": None,
        "ci_high": None,
        "se": None,
        "tau2": None,
        "p_value": result.p_value,
        "n_permutations": result.n_permutations,
    }


@dataclass
class _KindInput:
    kind: SummaryKind
    summaries: list
    full_cov: np.ndarray | None = None
    study: Study | None = None


def _estimate_kind(item: _KindInput, config: AnalysisConfig) -> list[dict]:
    kind = item.kind.value
    rows: list[dict] = []
    d, v = summaries_to_arrays(item.summaries)
    cov = item.full_cov if config.covariance_mode is CovarianceMode.FULL else None
    ests = config.estimators
    if any(e in ests for e in ("first_level", "two_level", "profile", "bayes")) and len(d) < 2:
        raise TooFewPairs(f"{kind}: second-stage inference needs at least 2 pairs")
    if "first_level" in ests:
        rows.append(_effect_row(kind, first_level_mle(item.summaries)))
    if "two_level" in ests:
        rows.append(_effect_row(kind, two_level_mle(item.summaries, cov)))
    if "profile" in ests:
        rows.append(_effect_row(kind, profile_mle(item.summaries, cov)))
    if "bayes" in ests:
        rows.append(_effect_row(kind, bayes_uniform_shrinkage(item.summaries, cov, BayesConfig(v0=config.bayes_v0))))
    for method in ("permutation_exact", "permutation_mc"):
        if method not in ests:
            continue
        for stat in config.permutation_statistics:
            refit = (config.permutation_refit and item.study is not None
                     and item.kind is SummaryKind.CALIBRATED and stat == Statistic.MEAN.value)
            if refit:
                result = permute_refit(
                    item.study,
                    mode="exact" if method == "permutation_exact" else "monte_carlo",
                    n_draws=config.mc_draws,
                    seed=config.seed or 0,
                    link=config.link,
                    arm_specific_slopes=config.arm_specific_slopes,
                    cov_type=config.sandwich,
                )
            elif method == "permutation_exact":
                result = permute_exact(d, stat, variances=v, full_cov=cov)
            else:
                result = permute_monte_carlo(d, stat, n_draws=config.mc_draws, seed=config.seed,
                                             variances=v, full_cov=cov)
            rows.append(_permutation_row(kind, method, result))
    return rows


def _pair_rows(kind: str, summaries, extras_for) -> list[dict]:
    rows = []
    for s in summaries:
        extra = extras_for(s.pair_id)
        rows.append({
            "kind": kind,
            "pair_id": s.pair_id,
            "n_control": extra.get("n_control"),
            "n_intervention": extra.get("n_intervention"),
            "mu_control": extra.get("mu_control"),
            "mu_intervention": extra.get("mu_intervention"),
            "delta": s.delta,
            "sqrt_v": s.sqrt_v,
            "variance": s.variance,
        })
    return rows


def _dependence_rows(items) -> tuple[list[dict], list[str]]:
    out, notes = [], []
    for item in items:
        try:
            out.append(dependence_check(item.summaries).to_dict())
        except TooFewPairs as exc:
            notes.append(f"{item.kind.value}: {exc}")
    return out, notes


def run_analysis(data: Union[Study, SummaryData, list], config: AnalysisConfig,
                 input_digests: dict | None = None) -> AnalysisReport:
    """Run the configured pipeline on a Study (patient mode) or summaries (summary mode)."""
    notes: list[str] = []
    coefficients: list[dict] = []
    imbalance: list[dict] = []
    items: list[_KindInput] = []
    pair_rows: list[dict] = []

    if config.mode is InputMode.PATIENT:
        if not isinstance(data, Study):
            raise ConfigError("patient mode needs a Study")
        study = data
        crude = crude_summaries(study)
        means = {
            p.pair_id: {
                "n_control": p.control.n_sampled,
                "n_intervention": p.intervention.n_sampled,
                "mu_control": arm_mean_and_variance(p.control)[0],
                "mu_intervention": arm_mean_and_variance(p.intervention)[0],
            }
            for p in study.pairs
        }
        items.append(_KindInput(SummaryKind.CRUDE, crude, np.diag([s.variance for s in crude])))
        pair_rows += _pair_rows("crude", crude, lambda pid: means[pid])
        if config.calibration:
            target = study
            if config.outcome_range is not None:
                lo, hi = config.outcome_range
                target = study.map_arms(lambda a: a.with_outcomes(rescale_outcomes(a.outcomes, lo, hi)))
            design = build_design(target, arm_specific_slopes=config.arm_specific_slopes)
            coef = fit(design, link=config.link, cov_type=config.sandwich)
            calibrated = calibrate_study(target, coef)
            if config.outcome_range is not None:
                lo, hi = config.outcome_range
                calibrated = calibrated.affine(hi - lo, lo)
            se = np.sqrt(np.clip(np.diag(coef.covariance), 0.0, None))
            coefficients = [
                {"name": n, "estimate": float(t), "se": float(s)}
                for n, t, s in zip(coef.column_names, coef.theta, se)
            ]
            cal_means = {
                pid: {**means[pid], "mu_control": float(calibrated.mu[i, 0]),
                      "mu_intervention": float(calibrated.mu[i, 1])}
                for i, pid in enumerate(calibrated.pair_ids)
            }
            # refit permutation works on the (possibly rescaled) fitted study; p-values are scale-free
            items.append(_KindInput(SummaryKind.CALIBRATED, list(calibrated.deltas),
                                    calibrated.delta_covariance, target))
            pair_rows += _pair_rows("calibrated", calibrated.deltas, lambda pid: cal_means[pid])
        imbalance = [dataclasses.asdict(r) for r in imbalance_report(study, welch=config.welch).rows]
    else:
        if isinstance(data, Study):
            raise ConfigError("summary mode needs summaries, not a Study")
        if not isinstance(data, SummaryData):
            data = SummaryData(list(data))
        if config.covariance_mode is CovarianceMode.FULL:
            notes.append("summary input carries no off-diagonal covariance; full mode uses the diagonal")
        for kind, summaries in data.by_kind().items():
            items.append(_KindInput(kind, summaries, np.diag([s.variance for s in summaries])))
            pair_rows += _pair_rows(kind.value, summaries, lambda pid, k=kind.value: data.extras.get((k, pid), {}))

    effect_rows: list[dict] = []
    for item in items:
        effect_rows += _estimate_kind(item, config)
    dependence, dep_notes = _dependence_rows(items)
    notes += dep_notes
    provenance = {
        "package": "paircal",
        "version": __version__,
        "config": config.to_dict(),
        "inputs": dict(sorted((input_digests or {}).items())),
        "notes": notes,
    }
    return AnalysisReport(pair_rows, effect_rows, imbalance, dependence, coefficients, provenance)
