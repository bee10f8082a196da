"""Serialise an AnalysisReport as JSON, aligned text tables, or a zip of CSV files."""

from __future__ import annotations

import csv
import io
import json
import zipfile

from .analysis import AnalysisReport
from .errors import UnknownFormat

FORMATS = ("json", "text", "csv-bundle")
_FIXED_ZIP_TIME = (1980, 1, 1, 0, 0, 0)

_PAIR_ROWS = (
    ("n_control", "n_{p,1}"),
    ("n_intervention", "n_{p,2}"),
    ("mu_control", "mu_{p,1}"),
    ("mu_intervention", "mu_{p,2}"),
    ("delta", "delta_p"),
    ("sqrt_v", "sqrt(v_p)"),
)
_EFFECT_COLUMNS = ("kind", "method", "statistic", "estimate", "ci_low", "ci_high", "se", "tau2", "p_value",
                   "n_permutations")
_IMBALANCE_COLUMNS = ("pair_id", "covariate", "level", "metric", "value", "note")


def _round(value, digits: int):
    if isinstance(value, float):
        return round(value, digits)
    return value


def display_block(report: AnalysisReport) -> dict:
    """Tables rounded like the published ones: one decimal, p-values two."""
    def rounded(row, p_keys=("p_value",)):
        return {k: _round(v, 2 if k in p_keys else 1) for k, v in row.items()}

    return {
        "pair_table": [rounded(r) for r in report.pair_table],
        "effect_table": [rounded(r) for r in report.effect_table],
        "dependence": [
            {"kind": d["kind"], "r_squared": _round(d["r_squared"], 2), "slope": _round(d["slope"], 2)}
            for d in report.dependence
        ],
    }


def _json(report: AnalysisReport) -> bytes:
    doc = report.to_dict()
    doc["display"] = display_block(report)
    return (json.dumps(doc, indent=2, allow_nan=False) + "\n").encode("utf-8")


def _fmt(value, digits: int = 1) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def _align(rows: list[list[str]], left: int = 1) -> list[str]:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [c.ljust(w) if j < left else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
    return lines


def _text(report: AnalysisReport) -> bytes:
    out: list[str] = []
    kinds = list(dict.fromkeys(r["kind"] for r in report.pair_table))
    pair_ids = list(dict.fromkeys(r["pair_id"] for r in report.pair_table))
    out.append("Per-pair summaries")
    rows = [["", "pair"] + pair_ids]
    for kind in kinds:
        by_pair = {r["pair_id"]: r for r in report.pair_table if r["kind"] == kind}
        rows.append([kind, ""] + [""] * len(pair_ids))
        for key, label in _PAIR_ROWS:
            values = [by_pair.get(pid, {}).get(key) for pid in pair_ids]
            if all(v is None for v in values):
                continue
            rows.append(["", label] + [_fmt(v) for v in values])
    out += _align(rows, left=2)

    if report.effect_table:
        out += ["", "Effect estimates"]
        rows = [["kind", "method", "statistic", "estimate", "95% CI", "se", "tau2", "p-value"]]
        for r in report.effect_table:
            ci = "-" if r["ci_low"] is None else f"({r['ci_low']:.1f}, {r['ci_high']:.1f})"
            rows.append([r["kind"], r["method"], r["statistic"] or "-", _fmt(r["estimate"]), ci, _fmt(r["se"]),
                         _fmt(r["tau2"]), _fmt(r["p_value"], 3)])
        out += _align(rows, left=3)

    if report.imbalance_table:
        out += ["", "Covariate imbalance (control vs intervention)"]
        imb_pairs = list(dict.fromkeys(r["pair_id"] for r in report.imbalance_table))
        keys = list(dict.fromkeys((r["covariate"], r["level"], r["metric"]) for r in report.imbalance_table))
        lookup = {(r["pair_id"], r["covariate"], r["level"], r["metric"]): r["value"] for r in report.imbalance_table}
        rows = [["covariate", "metric"] + imb_pairs]
        for cov, level, metric in keys:
            label = cov if level is None else f"{cov}={level}"
            rows.append([label, metric] + [_fmt(lookup.get((pid, cov, level, metric)), 2) for pid in imb_pairs])
        out += _align(rows, left=2)

    if report.dependence:
        out += ["", "Dependence of sqrt(v_p) on delta_p"]
        rows = [["kind", "R^2", "slope", "intercept"]]
        for d in report.dependence:
            rows.append([d["kind"], _fmt(d["r_squared"], 3), _fmt(d["slope"], 3), _fmt(d["intercept"], 3)])
        out += _align(rows)

    notes = report.provenance.get("notes") or []
    if notes:
        out += ["", "Notes"] + [f"- {n}" for n in notes]
    return ("\n".join(out) + "\n").encode("utf-8")


def _csv_bytes(columns, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c]
                         for c in columns])
    return buf.getvalue().encode("utf-8")


def csv_tables(report: AnalysisReport) -> dict[str, bytes]:
    pair_cols = ("kind", "pair_id", "n_control", "n_intervention", "mu_control", "mu_intervention", "delta",
                 "sqrt_v", "variance")
    # one row per pair, one (x, y) column pair per kind: each kind is a plot panel
    kinds = [d["kind"] for d in report.dependence]
    by_pair: dict[str, dict] = {}
    for d in report.dependence:
        for p in d["points"]:
            row = by_pair.setdefault(p["pair_id"], {"pair_id": p["pair_id"]})
            row[f"x_{d['kind']}"] = p["delta"]
            row[f"y_{d['kind']}"] = p["sqrt_v"]
    dep_cols = ("pair_id",) + tuple(f"{axis}_{k}" for k in kinds for axis in ("x", "y"))
    files = {
        "pair_table.csv": _csv_bytes(pair_cols, report.pair_table),
        "effect_table.csv": _csv_bytes(_EFFECT_COLUMNS, report.effect_table),
        "imbalance_table.csv": _csv_bytes(_IMBALANCE_COLUMNS, report.imbalance_table),
        "dependence.csv": _csv_bytes(dep_cols, list(by_pair.values())),
        "dependence_fit.csv": _csv_bytes(("kind", "r_squared", "slope", "intercept", "degenerate"),
                                         report.dependence),
    }
    if report.coefficients:
        files["coefficients.csv"] = _csv_bytes(("name", "estimate", "se"), report.coefficients)
    return files


def _zip(files: dict[str, bytes]) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(files):
            info = zipfile.ZipInfo(name, date_time=_FIXED_ZIP_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, files[name])
    return buf.getvalue()


def emit_report(report: AnalysisReport, format: str = "json") -> bytes:
    """Render ``report``; ``csv-bundle`` returns a zip archive with one CSV per table."""
    if format == "json":
        return _json(report)
    if format == "text":
        return _text(report)
    if format == "csv-bundle":
        return _zip(csv_tables(report))
    raise UnknownFormat(f"unknown report format {format!r}; choose from {list(FORMATS)}")
