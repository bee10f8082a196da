"""CSV and JSON input.

Patient file: header row, then ``pair_id, role, outcome``, an optional
``weight`` column, and one column per covariate. A covariate column is
continuous if every value is numeric and unquoted, otherwise categorical;
an explicit schema file overrides this inference.

Cluster file: ``pair_id, role, n_served``.

Summary file: ``pair_id, delta`` and one of ``sqrt_v`` / ``variance``, plus
optional ``kind`` (crude | calibrated, default crude) and the per-arm
extras ``n_control, n_intervention, mu_control, mu_intervention``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import (
    ArmRole,
    ClusterArm,
    CovariateSchema,
    PairSummary,
    Study,
    SummaryKind,
    pair_sort_key,
    validate_study,
)
from .errors import NegativeVariance, ParseError

logger = logging.getLogger(__name__)

REQUIRED_PATIENT = ("pair_id", "role", "outcome")
WEIGHT_COLUMN = "weight"
SUMMARY_EXTRAS = ("n_control", "n_intervention", "mu_control", "mu_intervention")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", str(path)) from exc
    except UnicodeDecodeError as exc:
        raise ParseError("file is not valid UTF-8", str(path)) from exc


def _rows(text: str, path: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    reader = csv.reader(io.StringIO(text))
    rows = []
    header = None
    for record in reader:
        line = reader.line_num
        if not record or all(not f.strip() for f in record):
            continue
        if header is None:
            header = [h.strip() for h in record]
            continue
        if len(record) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(record)}", path, line)
        rows.append((line, [f.strip() for f in record]))
    if header is None:
        raise ParseError("missing header row", path)
    if len(set(header)) != len(header):
        raise ParseError("duplicate column names in header", path, 1)
    return header, rows


def _quoted_columns(text: str, n_cols: int) -> set[int]:
    """Indices of columns in which some field is quoted."""
    quoted: set[int] = set()
    reader = csv.reader(io.StringIO(text), quoting=csv.QUOTE_NONNUMERIC)
    while True:
        try:
            record = next(reader)
        except StopIteration:
            break
        except ValueError:
            continue
        if reader.line_num == 1 or len(record) != n_cols:
            continue
        quoted.update(j for j, v in enumerate(record) if isinstance(v, str))
    return quoted


def _float(value: str, what: str, path: str, line: int) -> float:
    try:
        x = float(value)
    except ValueError:
        raise ParseError(f"{what} {value!r} is not a number", path, line) from None
    if not math.isfinite(x):
        raise ParseError(f"{what} must be finite, got {value!r}", path, line)
    return x


def _is_number(value: str) -> bool:
    try:
        return math.isfinite(float(value))
    except ValueError:
        return False


def load_schema(path) -> CovariateSchema:
    try:
        data = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from exc
    return CovariateSchema.from_dict(data)


def _infer_schema(header, rows, covariate_cols, quoted) -> CovariateSchema:
    continuous, categorical = [], []
    for j in covariate_cols:
        values = [r[j] for _, r in rows]
        if j not in quoted and all(_is_number(v) for v in values):
            continuous.append(header[j])
        else:
            levels = sorted(set(values), key=pair_sort_key)
            categorical.append((header[j], tuple(levels)))
    return CovariateSchema(tuple(continuous), tuple(categorical))


def load_cluster_csv(path) -> dict[tuple[str, ArmRole], int]:
    path = str(path)
    header, rows = _rows(_read_text(path), path)
    for col in ("pair_id", "role", "n_served"):
        if col not in header:
            raise ParseError(f"missing required column {col!r}", path, 1)
    ip, ir, ins = header.index("pair_id"), header.index("role"), header.index("n_served")
    served = {}
    for line, r in rows:
        try:
            role = ArmRole.parse(r[ir])
        except ValueError as exc:
            raise ParseError(str(exc), path, line) from None
        n = _float(r[ins], "n_served", path, line)
        if n != int(n) or n < 1:
            raise ParseError(f"n_served must be a positive integer, got {r[ins]!r}", path, line)
        key = (r[ip], role)
        if key in served:
            raise ParseError(f"duplicate cluster row for pair {r[ip]} {role.label}", path, line)
        served[key] = int(n)
    return served


def load_patient_csv(path_data, path_clusters=None, schema=None) -> Study:
    """Read patient and cluster files into a validated Study.

    ``schema`` may be a CovariateSchema or a path to a JSON schema file with
    ``{"continuous": [...], "categorical": {"name": [levels...]}}``; the first
    listed level is the reference. Without a cluster file every arm gets
    n_served = n_sampled (with a logged warning).
    """
    path = str(path_data)
    text = _read_text(path)
    header, rows = _rows(text, path)
    for col in REQUIRED_PATIENT:
        if col not in header:
            raise ParseError(f"missing required column {col!r}", path, 1)
    ip, ir, iy = (header.index(c) for c in REQUIRED_PATIENT)
    iw = header.index(WEIGHT_COLUMN) if WEIGHT_COLUMN in header else None
    covariate_cols = [j for j, h in enumerate(header) if j not in (ip, ir, iy, iw)]

    if schema is not None and not isinstance(schema, CovariateSchema):
        schema = load_schema(schema)
    if schema is None:
        schema = _infer_schema(header, rows, covariate_cols, _quoted_columns(text, len(header)))
    else:
        missing = [c for c in (*schema.continuous, *schema.categorical_names) if c not in header]
        if missing:
            raise ParseError(f"schema columns not in file: {missing}", path, 1)
        ignored = [header[j] for j in covariate_cols
                   if header[j] not in schema.continuous and header[j] not in schema.categorical_names]
        if ignored:
            logger.warning("columns not in schema are ignored: %s", ignored)
    cont_idx = [header.index(c) for c in schema.continuous]
    cat_idx = [header.index(c) for c in schema.categorical_names]

    cells: dict[tuple[str, ArmRole], dict[str, list]] = {}
    for line, r in rows:
        try:
            role = ArmRole.parse(r[ir])
        except ValueError as exc:
            raise ParseError(str(exc), path, line) from None
        if not r[ip]:
            raise ParseError("empty pair_id", path, line)
        cell = cells.setdefault((r[ip], role), {"y": [], "x": [], "c": [], "w": []})
        cell["y"].append(_float(r[iy], "outcome", path, line))
        cell["x"].append([_float(r[j], f"covariate {header[j]!r}", path, line) for j in cont_idx])
        cell["c"].append([r[j] for j in cat_idx])
        if iw is not None:
            w = _float(r[iw], "weight", path, line)
            if w <= 0:
                raise ParseError(f"weight must be positive, got {r[iw]!r}", path, line)
            cell["w"].append(w)

    served = load_cluster_csv(path_clusters) if path_clusters is not None else {}
    arms = []
    for (pid, role), cell in cells.items():
        n = len(cell["y"])
        arms.append(
            ClusterArm(
                pair_id=pid,
                role=role,
                outcomes=np.array(cell["y"]),
                continuous=np.array(cell["x"], dtype=float).reshape(n, len(cont_idx)),
                categorical=np.array(cell["c"], dtype=object).reshape(n, len(cat_idx)),
                n_served=served.get((pid, role)),
                weights=np.array(cell["w"]) if iw is not None else None,
            )
        )
    unknown = sorted(set(served) - set(cells), key=lambda k: (pair_sort_key(k[0]), k[1]))
    if unknown:
        logger.warning("cluster rows without patients are ignored: %s", unknown)
    return validate_study(Study.from_arms(arms, schema))


@dataclass
class SummaryData:
    """Per-pair summaries with optional per-arm extras keyed by (kind, pair_id)."""

    summaries: list[PairSummary]
    extras: dict[tuple[str, str], dict] = field(default_factory=dict)

    def by_kind(self) -> dict[SummaryKind, list[PairSummary]]:
        out: dict[SummaryKind, list[PairSummary]] = {}
        for s in self.summaries:
            out.setdefault(s.kind, []).append(s)
        return out


def _parse_summary_text(text: str, path: str) -> SummaryData:
    header, rows = _rows(text, path)
    for col in ("pair_id", "delta"):
        if col not in header:
            raise ParseError(f"missing required column {col!r}", path, 1)
    if "sqrt_v" not in header and "variance" not in header:
        raise ParseError("need a 'sqrt_v' or 'variance' column", path, 1)
    col = {h: j for j, h in enumerate(header)}
    summaries, extras, seen = [], {}, set()
    for line, r in rows:
        kind_text = r[col["kind"]].lower() if "kind" in col else "crude"
        try:
            kind = SummaryKind(kind_text)
        except ValueError:
            raise ParseError(f"unknown kind {kind_text!r}", path, line) from None
        pid = r[col["pair_id"]]
        if (kind, pid) in seen:
            raise ParseError(f"duplicate row for pair {pid} ({kind.value})", path, line)
        seen.add((kind, pid))
        delta = _float(r[col["delta"]], "delta", path, line)
        if "variance" in col and r[col["variance"]] != "":
            variance = _float(r[col["variance"]], "variance", path, line)
            if variance < 0:
                raise NegativeVariance(f"{path}:{line}: negative variance {variance}")
        else:
            sd = _float(r[col["sqrt_v"]], "sqrt_v", path, line)
            if sd < 0:
                raise NegativeVariance(f"{path}:{line}: negative sqrt_v {sd}")
            variance = sd * sd
        summaries.append(PairSummary(pid, delta, variance, kind))
        extra = {}
        for name in SUMMARY_EXTRAS:
            if name in col and r[col[name]] != "":
                value = _float(r[col[name]], name, path, line)
                extra[name] = int(value) if name.startswith("n_") else value
        if extra:
            extras[(kind.value, pid)] = extra
    if len({s.kind for s in summaries}) > 1:
        by = {}
        for s in summaries:
            by.setdefault(s.kind, set()).add(s.pair_id)
        if len({frozenset(v) for v in by.values()}) > 1:
            logger.warning("summary kinds cover different pair sets")
    return SummaryData(summaries, extras)


def load_summary_data(path) -> SummaryData:
    return _parse_summary_text(_read_text(path), str(path))


def load_summary_csv(path) -> list[PairSummary]:
    return load_summary_data(path).summaries


def guided_care_table1() -> SummaryData:
    """Per-pair crude and calibrated summaries of the Guided Care study (7 pairs)."""
    text = resources.files("paircal").joinpath("data/guided_care_table1.csv").read_text(encoding="utf-8")
    return _parse_summary_text(text, "guided_care_table1.csv")


def guided_care_summaries(kind: str | SummaryKind = SummaryKind.CRUDE) -> list[PairSummary]:
    return guided_care_table1().by_kind()[SummaryKind(kind)]
