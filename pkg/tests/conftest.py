import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from paircal.core import ArmRole, ClusterArm, CovariateSchema, PairSummary, Study, SummaryKind, validate_study

settings.register_profile(
    "paircal",
    max_examples=200,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("paircal")

# Guided Care per-pair summaries, as published (one decimal)
CRUDE_DELTA = [-0.8, -0.1, 0.3, 3.8, 4.5, -2.6, -1.3]
CRUDE_SQRT_V = [2.7, 2.6, 2.0, 2.7, 2.1, 2.6, 2.2]
CAL_DELTA = [0.9, 3.0, 0.1, 1.9, 2.3, 0.5, 0.8]
CAL_SQRT_V = [2.1, 2.4, 1.5, 2.0, 1.7, 2.2, 1.7]


def summaries(deltas, sqrt_v, kind=SummaryKind.CRUDE):
    return [PairSummary(str(i + 1), d, s * s, kind) for i, (d, s) in enumerate(zip(deltas, sqrt_v))]


@pytest.fixture
def crude_rows():
    return summaries(CRUDE_DELTA, CRUDE_SQRT_V)


@pytest.fixture
def calibrated_rows():
    return summaries(CAL_DELTA, CAL_SQRT_V, SummaryKind.CALIBRATED)


def make_study(
    rng: np.random.Generator,
    n_pairs: int = 3,
    n_range: tuple[int, int] = (6, 12),
    n_cont: int = 2,
    categorical: bool = False,
    effect: float = 0.0,
    slopes=None,
    imbalance: float = 0.0,
    served: bool = True,
    noise: float = 1.0,
) -> Study:
    """Synthetic patient-level study; ``imbalance`` shifts intervention covariates."""
    slopes = np.ones(n_cont) if slopes is None else np.asarray(slopes, dtype=float)
    schema = CovariateSchema(
        tuple(f"x{j}" for j in range(n_cont)),
        (("grp", ("a", "b", "c")),) if categorical else (),
    )
    arms = []
    for p in range(n_pairs):
        base = rng.normal(0, 1)
        for role in ArmRole:
            n = int(rng.integers(n_range[0], n_range[1] + 1))
            shift = imbalance if role is ArmRole.INTERVENTION else 0.0
            x = rng.normal(shift, 1.0, size=(n, n_cont))
            y = base + x @ slopes + rng.normal(0, noise, size=n)
            if role is ArmRole.INTERVENTION:
                y = y - effect
            cat = None
            if categorical:
                labels = np.array(["a", "b", "c"], dtype=object)
                idx = np.concatenate([[0, 1, 2], rng.integers(0, 3, size=n - 3)])
                cat = labels[idx][:, None]
                y = y + np.where(idx == 1, 0.5, 0.0)
            arms.append(
                ClusterArm(str(p + 1), role, y, x, cat, n_served=int(n * rng.integers(2, 6)) if served else None)
            )
    return validate_study(Study.from_arms(arms, schema))


# acceptance reporting -------------------------------------------------------

ACCEPTANCE: dict[int, dict] = {}
PROPERTY_OUTCOMES: dict[str, str] = {}
_PROPERTY_IDS: set[str] = set()


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = {"ok": bool(ok), "detail": detail}
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}")
    return bool(ok)


def pytest_collection_modifyitems(session, config, items):
    for item in items:
        if getattr(getattr(item, "obj", None), "is_hypothesis_test", False):
            _PROPERTY_IDS.add(item.nodeid)
    # the invariance criterion reads the property outcomes, so it runs last
    last = [i for i in items if i.name.startswith("test_criterion_9")]
    items[:] = [i for i in items if i not in last] + last


def pytest_runtest_logreport(report):
    if report.nodeid in _PROPERTY_IDS and (report.when == "call" or report.outcome != "passed"):
        if PROPERTY_OUTCOMES.get(report.nodeid) != "failed":
            PROPERTY_OUTCOMES[report.nodeid] = report.outcome
    if "test_criterion_" in report.nodeid and report.outcome == "failed":
        n = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
        entry = ACCEPTANCE.setdefault(n, {"ok": False, "detail": "test raised before recording"})
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if entry['ok'] else 'FAIL'} | {entry['detail']}")
