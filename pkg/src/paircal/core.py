"""Study data model, validation and the crude within-pair quantities.

A study is a set of matched pairs of clusters (clinical practices). In each
pair one cluster is the control arm (role 1) and the other the intervention
arm (role 2). Patients are sampled within each cluster; each cluster also
carries the number of patients it serves, which weights the two arms when
the pair-level covariate distribution is pooled.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import Issue, raise_issues

logger = logging.getLogger(__name__)


class ArmRole(enum.IntEnum):
    CONTROL = 1
    INTERVENTION = 2

    @property
    def other(self) -> "ArmRole":
        return ArmRole.INTERVENTION if self is ArmRole.CONTROL else ArmRole.CONTROL

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "ArmRole":
        if isinstance(value, ArmRole):
            return value
        text = str(value).strip().lower()
        if text in ("control", "c", "1", "ctrl"):
            return cls.CONTROL
        if text in ("intervention", "treatment", "i", "t", "2"):
            return cls.INTERVENTION
        raise ValueError(f"unrecognised arm role {value!r}")


class SummaryKind(str, enum.Enum):
    CRUDE = "crude"
    CALIBRATED = "calibrated"


@dataclass(frozen=True)
class CovariateSchema:
    """Names of continuous covariates and (name, levels) of categorical ones.

    The first level of each categorical covariate is the reference level and
    is omitted when the covariate is encoded into indicator columns.
    """

    continuous: tuple[str, ...] = ()
    categorical: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(
            self, "categorical", tuple((str(n), tuple(str(l) for l in lv)) for n, lv in self.categorical)
        )

    @property
    def categorical_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.categorical)

    def levels(self, name: str) -> tuple[str, ...]:
        for n, lv in self.categorical:
            if n == name:
                return lv
        raise KeyError(name)

    @property
    def n_continuous(self) -> int:
        return len(self.continuous)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical)

    @property
    def is_empty(self) -> bool:
        return not self.continuous and not self.categorical

    def to_dict(self) -> dict:
        return {
            "continuous": list(self.continuous),
            "categorical": {name: list(levels) for name, levels in self.categorical},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CovariateSchema":
        cat = data.get("categorical", {}) or {}
        if isinstance(cat, dict):
            cat = list(cat.items())
        return cls(continuous=tuple(data.get("continuous", ()) or ()), categorical=tuple(cat))


@dataclass(frozen=True)
class CovariateVector:
    continuous: tuple[float, ...] = ()
    categorical: tuple[str, ...] = ()


@dataclass(frozen=True)
class PatientRecord:
    pair_id: str
    role: ArmRole
    outcome: float
    covariates: CovariateVector = CovariateVector()
    weight: float = 1.0


def _frozen_array(values, dtype, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(0, 0) if arr.size == 0 else arr.reshape(-1, 1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ClusterArm:
    """One clinical practice of a pair, stored column-wise.

    ``continuous`` is (n, k_cont) float and ``categorical`` is (n, k_cat) of
    level labels, both ordered as in the study's covariate schema.
    ``n_served`` may be None before validation; validation replaces it by
    ``n_sampled``.
    """

    pair_id: str
    role: ArmRole
    outcomes: np.ndarray
    continuous: np.ndarray | None = None
    categorical: np.ndarray | None = None
    n_served: int | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "pair_id", str(self.pair_id))
        object.__setattr__(self, "role", ArmRole.parse(self.role))
        y = _frozen_array(self.outcomes, float, 1).reshape(-1)
        object.__setattr__(self, "outcomes", y)
        n = y.shape[0]
        cont = np.empty((n, 0)) if self.continuous is None else self.continuous
        cat = np.empty((n, 0), dtype=object) if self.categorical is None else self.categorical
        object.__setattr__(self, "continuous", _frozen_array(cont, float, 2))
        cat_arr = _frozen_array(cat, object, 2)
        object.__setattr__(self, "categorical", cat_arr)
        if self.weights is not None:
            object.__setattr__(self, "weights", _frozen_array(self.weights, float, 1).reshape(-1))

    @property
    def n_sampled(self) -> int:
        return int(self.outcomes.shape[0])

    @property
    def records(self) -> tuple[PatientRecord, ...]:
        w = self.weights if self.weights is not None else np.ones(self.n_sampled)
        return tuple(
            PatientRecord(
                pair_id=self.pair_id,
                role=self.role,
                outcome=float(self.outcomes[k]),
                covariates=CovariateVector(
                    tuple(float(v) for v in self.continuous[k]),
                    tuple(str(v) for v in self.categorical[k]),
                ),
                weight=float(w[k]),
            )
            for k in range(self.n_sampled)
        )

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], n_served: int | None = None) -> "ClusterArm":
        if not records:
            raise ValueError("cannot build an arm from zero records")
        first = records[0]
        weights = [r.weight for r in records]
        return cls(
            pair_id=first.pair_id,
            role=first.role,
            outcomes=[r.outcome for r in records],
            continuous=[list(r.covariates.continuous) for r in records],
            categorical=[list(r.covariates.categorical) for r in records],
            n_served=n_served,
            weights=None if all(w == 1.0 for w in weights) else weights,
        )

    def with_role(self, role: ArmRole) -> "ClusterArm":
        return dataclasses.replace(self, role=role)

    def with_outcomes(self, outcomes) -> "ClusterArm":
        return dataclasses.replace(self, outcomes=np.asarray(outcomes, dtype=float))


@dataclass(frozen=True, eq=False)
class Pair:
    pair_id: str
    control: ClusterArm | None
    intervention: ClusterArm | None

    def arm(self, role: ArmRole) -> ClusterArm:
        arm = self.control if ArmRole.parse(role) is ArmRole.CONTROL else self.intervention
        if arm is None:
            raise KeyError(f"pair {self.pair_id} has no {ArmRole.parse(role).label} arm")
        return arm

    @property
    def arms(self) -> tuple[ClusterArm, ClusterArm]:
        return (self.arm(ArmRole.CONTROL), self.arm(ArmRole.INTERVENTION))

    def swapped(self) -> "Pair":
        """The same two practices with their assignment labels exchanged."""
        c, t = self.control, self.intervention
        return Pair(
            self.pair_id,
            None if t is None else t.with_role(ArmRole.CONTROL),
            None if c is None else c.with_role(ArmRole.INTERVENTION),
        )


def pair_sort_key(pair_id: str):
    text = str(pair_id)
    try:
        return (0, float(text), text)
    except ValueError:
        return (1, 0.0, text)


@dataclass(frozen=True, eq=False)
class Study:
    pairs: tuple[Pair, ...]
    schema: CovariateSchema = field(default_factory=CovariateSchema)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))

    @property
    def pair_ids(self) -> list[str]:
        return [p.pair_id for p in self.pairs]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def pair(self, pair_id: str) -> Pair:
        for p in self.pairs:
            if p.pair_id == str(pair_id):
                return p
        raise KeyError(pair_id)

    def swap_labels(self, pair_ids: Iterable[str]) -> "Study":
        flip = {str(p) for p in pair_ids}
        return Study(tuple(p.swapped() if p.pair_id in flip else p for p in self.pairs), self.schema)

    def map_arms(self, func) -> "Study":
        """Return a study with ``func(arm)`` applied to every arm."""
        return Study(
            tuple(
                Pair(p.pair_id, None if p.control is None else func(p.control),
                     None if p.intervention is None else func(p.intervention))
                for p in self.pairs
            ),
            self.schema,
        )

    @classmethod
    def from_arms(cls, arms: Iterable[ClusterArm], schema: CovariateSchema | None = None) -> "Study":
        """Group arms into pairs. Duplicate (pair, role) arms are kept for validation to report."""
        slots: dict[str, dict[ArmRole, list[ClusterArm]]] = {}
        for arm in arms:
            slots.setdefault(arm.pair_id, {}).setdefault(arm.role, []).append(arm)
        pairs = []
        for pid in sorted(slots, key=pair_sort_key):
            roles = slots[pid]
            for extra in range(max(len(v) for v in roles.values())):
                c = roles.get(ArmRole.CONTROL, [])
                t = roles.get(ArmRole.INTERVENTION, [])
                pairs.append(Pair(pid, c[extra] if extra < len(c) else None, t[extra] if extra < len(t) else None))
        return cls(tuple(pairs), schema or CovariateSchema())

    @classmethod
    def from_records(
        cls,
        records: Iterable[PatientRecord],
        n_served: dict[tuple[str, ArmRole], int] | None = None,
        schema: CovariateSchema | None = None,
    ) -> "Study":
        groups: dict[tuple[str, ArmRole], list[PatientRecord]] = {}
        for r in records:
            groups.setdefault((str(r.pair_id), ArmRole.parse(r.role)), []).append(r)
        served = {(str(k[0]), ArmRole.parse(k[1])): v for k, v in (n_served or {}).items()}
        arms = [ClusterArm.from_records(recs, served.get(key)) for key, recs in groups.items()]
        return cls.from_arms(arms, schema)


@dataclass(frozen=True)
class PairSummary:
    pair_id: str
    delta: float
    variance: float
    kind: SummaryKind = SummaryKind.CRUDE

    def __post_init__(self):
        object.__setattr__(self, "pair_id", str(self.pair_id))
        object.__setattr__(self, "kind", SummaryKind(self.kind))
        if not self.variance >= 0:
            raise ValueError(f"pair {self.pair_id}: variance must be >= 0, got {self.variance}")

    @property
    def sqrt_v(self) -> float:
        return math.sqrt(self.variance)

    def negated(self) -> "PairSummary":
        return dataclasses.replace(self, delta=-self.delta)


def _check_arm(arm: ClusterArm, schema: CovariateSchema, issues: list[Issue]) -> None:
    where = {"pair_id": arm.pair_id, "role": arm.role.label}
    n = arm.n_sampled
    if n < 2:
        issues.append(Issue("TooFewPatients", f"{n} sampled patient(s); at least 2 are required", **where))
    if not np.all(np.isfinite(arm.outcomes)):
        issues.append(Issue("NonFiniteOutcome", "outcomes must be finite", **where))
    if arm.n_served is not None and arm.n_served < n:
        issues.append(Issue("InvalidServed", f"n_served={arm.n_served} is smaller than n_sampled={n}", **where))
    if arm.continuous.shape != (n, schema.n_continuous):
        issues.append(
            Issue("SchemaMismatch",
                  f"continuous covariates have shape {arm.continuous.shape}, expected ({n}, {schema.n_continuous})",
                  **where)
        )
    elif arm.continuous.size and not np.all(np.isfinite(arm.continuous)):
        issues.append(Issue("SchemaMismatch", "continuous covariates must be finite", **where))
    if arm.categorical.shape != (n, schema.n_categorical):
        issues.append(
            Issue("SchemaMismatch",
                  f"categorical covariates have shape {arm.categorical.shape}, expected ({n}, {schema.n_categorical})",
                  **where)
        )
    else:
        for j, (name, levels) in enumerate(schema.categorical):
            bad = sorted({str(v) for v in arm.categorical[:, j]} - set(levels))
            if bad:
                issues.append(Issue("SchemaMismatch", f"covariate {name!r} has undeclared level(s) {bad}", **where))
    if arm.weights is not None:
        if arm.weights.shape != (n,) or not np.all(arm.weights > 0):
            issues.append(Issue("InvalidWeights", "record weights must be positive, one per patient", **where))


def validate_study(study: Study, min_pairs: int = 1) -> Study:
    """Check every invariant of the study and return it with defaults filled in.

    All problems are collected before raising, so one call reports every bad
    pair/arm. Arms without ``n_served`` get ``n_served = n_sampled`` and a
    logged warning.
    """
    issues: list[Issue] = []
    seen: set[str] = set()
    if len(study.pairs) < min_pairs:
        issues.append(Issue("TooFewPairs", f"study has {len(study.pairs)} pair(s); need {min_pairs}"))
    fixed_pairs = []
    defaulted: list[str] = []
    for pair in study.pairs:
        if pair.pair_id in seen:
            issues.append(Issue("DuplicatePair", "pair id appears more than once", pair_id=pair.pair_id))
        seen.add(pair.pair_id)
        arms = {}
        for role in ArmRole:
            arm = pair.control if role is ArmRole.CONTROL else pair.intervention
            if arm is None:
                issues.append(Issue("MissingArm", f"no {role.label} arm", pair_id=pair.pair_id))
                continue
            if arm.pair_id != pair.pair_id or arm.role is not role:
                issues.append(
                    Issue("MissingArm", f"arm labelled ({arm.pair_id}, {arm.role.label}) stored in {role.label} slot",
                          pair_id=pair.pair_id)
                )
            _check_arm(arm, study.schema, issues)
            if arm.n_served is None:
                defaulted.append(f"{pair.pair_id}/{role.label}")
                arm = dataclasses.replace(arm, n_served=arm.n_sampled)
            arms[role] = arm
        fixed_pairs.append(Pair(pair.pair_id, arms.get(ArmRole.CONTROL), arms.get(ArmRole.INTERVENTION)))
    raise_issues(issues)
    if defaulted:
        logger.warning("n_served missing for %d arm(s) (%s); using n_served = n_sampled",
                       len(defaulted), ", ".join(defaulted))
    ordered = sorted(fixed_pairs, key=lambda p: pair_sort_key(p.pair_id))
    return Study(tuple(ordered), study.schema)


def arm_mean_and_variance(arm: ClusterArm) -> tuple[float, float]:
    """Sample mean of the outcomes and the estimated variance of that mean (s^2/n, divisor n-1)."""
    y = arm.outcomes
    n = y.shape[0]
    mean = float(np.mean(y))
    var = float(np.var(y, ddof=1)) / n if n > 1 else 0.0
    return mean, var


def crude_pair_summary(pair: Pair) -> PairSummary:
    """Control mean minus intervention mean, with the sum of the two variances of the means."""
    m1, v1 = arm_mean_and_variance(pair.arm(ArmRole.CONTROL))
    m2, v2 = arm_mean_and_variance(pair.arm(ArmRole.INTERVENTION))
    return PairSummary(pair.pair_id, m1 - m2, v1 + v2, SummaryKind.CRUDE)


def crude_summaries(study: Study) -> list[PairSummary]:
    return [crude_pair_summary(p) for p in study.pairs]


def summaries_to_arrays(summaries: Sequence[PairSummary]) -> tuple[np.ndarray, np.ndarray]:
    deltas = np.array([s.delta for s in summaries], dtype=float)
    variances = np.array([s.variance for s in summaries], dtype=float)
    return deltas, variances
