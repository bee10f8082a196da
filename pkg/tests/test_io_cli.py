import io
import json
import logging
import zipfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paircal.analysis import AnalysisConfig, AnalysisReport, run_analysis
from paircal.cli import main
from paircal.core import SummaryKind
from paircal.errors import NegativeVariance, ParseError, UnknownFormat
from paircal.estimators import first_level_mle, two_level_mle
from paircal.io import guided_care_summaries, guided_care_table1, load_patient_csv, load_summary_csv
from paircal.report import emit_report

from conftest import CRUDE_DELTA, CRUDE_SQRT_V, summaries

SUMMARY_HEADER = "pair_id,kind,delta,sqrt_v\n"


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _table1_csv(tmp_path):
    lines = [SUMMARY_HEADER]
    for s in guided_care_table1().summaries:
        lines.append(f"{s.pair_id},{s.kind.value},{s.delta},{s.sqrt_v}\n")
    return _write(tmp_path / "table1.csv", "".join(lines))


def _patient_csv(tmp_path, shift=0.0, duplicate=False):
    # within each cell x is orthogonal to y, so the fitted slope is exactly zero
    y = [1.0, 2.0, 3.0, 4.0]
    x = [1.0, -1.0, -1.0, 1.0]
    rows = ["pair_id,role,outcome,age" + (",age2" if duplicate else "") + "\n"]
    for p, base in (("1", 0.0), ("2", 5.0), ("3", -2.0)):
        for role, dy, dx in (("control", 1.0, 0.0), ("intervention", 0.0, shift)):
            for yi, xi in zip(y, x):
                extra = f",{xi + dx}" if duplicate else ""
                rows.append(f"{p},{role},{yi + base + dy},{xi + dx}{extra}\n")
    clusters = ["pair_id,role,n_served\n"] + [f"{p},{r},{n}\n" for p in "123"
                                               for r, n in (("control", 40), ("intervention", 60))]
    return _write(tmp_path / "patients.csv", "".join(rows)), _write(tmp_path / "clusters.csv", "".join(clusters))


# loaders ------------------------------------------------------------------

def test_table1_crude_rows_load_as_seven(tmp_path):
    crude = [s for s in load_summary_csv(_table1_csv(tmp_path)) if s.kind is SummaryKind.CRUDE]
    assert [s.delta for s in crude] == CRUDE_DELTA
    assert len(guided_care_summaries("crude")) == 7


def test_variance_column_equivalent(tmp_path):
    a = _write(tmp_path / "a.csv", "pair_id,delta,sqrt_v\n1,0.5,2.0\n2,1.5,3.0\n")
    b = _write(tmp_path / "b.csv", "pair_id,delta,variance\n1,0.5,4.0\n2,1.5,9.0\n")
    assert [s.variance for s in load_summary_csv(a)] == [s.variance for s in load_summary_csv(b)]
    assert two_level_mle(load_summary_csv(a)).point == two_level_mle(load_summary_csv(b)).point


def test_negative_variance(tmp_path):
    with pytest.raises(NegativeVariance):
        load_summary_csv(_write(tmp_path / "n.csv", "pair_id,delta,variance\n1,0.5,-1.0\n"))


def test_malformed_row_reports_line(tmp_path):
    path = _write(tmp_path / "bad.csv", "pair_id,delta,sqrt_v\n1,0.5,2.0\n2,abc,1.0\n")
    with pytest.raises(ParseError) as info:
        load_summary_csv(path)
    assert info.value.line == 3 and ":3:" in str(info.value)
    with pytest.raises(ParseError, match="expected 3 fields"):
        load_summary_csv(_write(tmp_path / "short.csv", "pair_id,delta,sqrt_v\n1,0.5\n"))


def test_patient_file_two_pairs_and_served_fallback(tmp_path, caplog):
    path = _write(tmp_path / "p.csv", "pair_id,role,outcome,site\n"
                  + "".join(f"{p},{r},{v},\"{s}\"\n" for p in "12" for r in ("control", "intervention")
                            for v, s in ((1.0, "a"), (2.5, "b"))))
    with caplog.at_level(logging.WARNING):
        study = load_patient_csv(path)
    assert len(study.pairs) == 2
    assert study.schema.categorical_names == ("site",)
    assert all(a.n_served == a.n_sampled for p in study.pairs for a in p.arms)
    assert sum("n_served" in r.getMessage() for r in caplog.records) == 1


def test_patient_file_with_clusters(tmp_path):
    data, clusters = _patient_csv(tmp_path)
    study = load_patient_csv(data, clusters)
    assert [a.n_served for a in study.pairs[0].arms] == [40, 60]
    assert study.schema.continuous == ("age",)


# analysis and reports -----------------------------------------------------

def test_summary_analysis_matches_modules():
    data = guided_care_table1()
    report = run_analysis(data, AnalysisConfig(estimators=("first_level", "two_level", "permutation_exact")))
    crude = data.by_kind()[SummaryKind.CRUDE]
    assert report.effect("crude", "first_level_mle")["estimate"] == first_level_mle(crude).point
    assert report.effect("crude", "two_level_mle")["tau2"] == two_level_mle(crude).tau2
    assert report.effect("calibrated", "permutation_exact", "mean")["p_value"] == 0.015625


def test_calibration_off_vs_on_with_zero_effect_covariate(tmp_path):
    data, clusters = _patient_csv(tmp_path, shift=3.0)
    study = load_patient_csv(data, clusters)
    report = run_analysis(study, AnalysisConfig(mode="patient", calibration=True, estimators=("first_level",)))
    slope = [c for c in report.coefficients if c["name"] == "age"][0]["estimate"]
    assert abs(slope) < 1e-12
    crude = [r["delta"] for r in report.pair_table if r["kind"] == "crude"]
    cal = [r["delta"] for r in report.pair_table if r["kind"] == "calibrated"]
    assert np.allclose(crude, cal, atol=1e-12, rtol=0)
    off = run_analysis(study, AnalysisConfig(mode="patient", calibration=False, estimators=("first_level",)))
    assert [r["delta"] for r in off.pair_table] == crude


def test_empty_estimator_set():
    report = run_analysis(guided_care_table1(), AnalysisConfig(estimators=()))
    assert report.effect_table == [] and len(report.pair_table) == 14 and len(report.dependence) == 2


def test_json_round_trip():
    report = run_analysis(guided_care_table1(), AnalysisConfig(estimators=("first_level", "two_level")))
    doc = json.loads(emit_report(report, "json"))
    assert "display" in doc
    back = AnalysisReport.from_dict({k: v for k, v in doc.items() if k != "display"})
    assert back.to_dict() == json.loads(json.dumps(report.to_dict()))
    assert back.effect("crude", "two_level_mle")["estimate"] == report.effect("crude", "two_level_mle")["estimate"]


def test_text_layout_follows_table_rows():
    text = emit_report(run_analysis(guided_care_table1(), AnalysisConfig(estimators=())), "text").decode()
    lines = text.splitlines()
    assert lines[1].split() == ["pair", "1", "2", "3", "4", "5", "6", "7"]
    delta_rows = [ln.split() for ln in lines if ln.strip().startswith("delta_p")]
    assert delta_rows[0][1:] == ["-0.8", "-0.1", "0.3", "3.8", "4.5", "-2.6", "-1.3"]
    assert delta_rows[1][1:] == ["0.9", "3.0", "0.1", "1.9", "2.3", "0.5", "0.8"]


def test_csv_bundle_dependence_points():
    report = run_analysis(guided_care_table1(), AnalysisConfig(estimators=("first_level",)))
    with zipfile.ZipFile(io.BytesIO(emit_report(report, "csv-bundle"))) as zf:
        names = zf.namelist()
        dep = zf.read("dependence.csv").decode().splitlines()
    assert {"pair_table.csv", "effect_table.csv", "dependence.csv", "dependence_fit.csv"} <= set(names)
    assert dep[0] == "pair_id,x_crude,y_crude,x_calibrated,y_calibrated"
    assert len(dep) == 1 + 7


def test_unknown_format():
    with pytest.raises(UnknownFormat):
        emit_report(run_analysis(guided_care_table1(), AnalysisConfig(estimators=())), "xml")


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.5, 3)), min_size=2, max_size=8),
       st.sampled_from(["json", "text", "csv-bundle"]))
def test_output_byte_identical(rows, fmt):
    data = summaries([r[0] for r in rows], [r[1] for r in rows])
    cfg = AnalysisConfig(estimators=("first_level", "two_level", "permutation_exact"),
                         permutation_statistics=("mean",))
    a = emit_report(run_analysis(data, cfg), fmt)
    b = emit_report(run_analysis(list(data), cfg), fmt)
    assert a == b


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.5, 3)), min_size=2, max_size=8))
def test_report_numbers_are_module_outputs(rows):
    data = summaries([r[0] for r in rows], [r[1] for r in rows])
    report = run_analysis(data, AnalysisConfig(estimators=("first_level", "two_level")))
    doc = json.loads(emit_report(report, "json"))
    row = [r for r in doc["effect_table"] if r["method"] == "two_level_mle"][0]
    est = two_level_mle(data)
    assert row["estimate"] == est.point and row["se"] == est.se and row["tau2"] == est.tau2


# command line -------------------------------------------------------------

def test_cli_analyze_json_and_text(tmp_path, capsysbinary):
    table = _table1_csv(tmp_path)
    out = tmp_path / "r.json"
    assert main(["analyze", "--summaries", str(table), "--estimators", "first_level", "--output", str(out)]) == 0
    doc = json.loads(out.read_bytes())
    assert doc["effect_table"][0]["estimate"] == pytest.approx(0.5428571428571428)
    assert main(["diagnose", "--summaries", str(table)]) == 0
    assert b"Dependence" in capsysbinary.readouterr().out


def test_cli_config_file_with_override(tmp_path):
    table = _table1_csv(tmp_path)
    cfg = _write(tmp_path / "c.json", json.dumps({"estimators": ["bayes"]}))
    out = tmp_path / "r.json"
    assert main(["analyze", "--config", str(cfg), "--summaries", str(table), "--estimators", "two_level",
                 "--output", str(out)]) == 0
    methods = {r["method"] for r in json.loads(out.read_bytes())["effect_table"]}
    assert methods == {"two_level_mle"}


def test_cli_csv_bundle_directory(tmp_path):
    target = tmp_path / "bundle"
    assert main(["analyze", "--summaries", str(_table1_csv(tmp_path)), "--estimators", "first_level",
                 "--format", "csv-bundle", "--output", str(target)]) == 0
    assert len((target / "dependence.csv").read_text().splitlines()) == 8


def test_cli_permute_and_simulate(tmp_path):
    d = _write(tmp_path / "cal.csv", SUMMARY_HEADER + "".join(
        f"{i + 1},crude,{x},{s}\n" for i, (x, s) in enumerate(zip([0.9, 3.0, 0.1, 1.9, 2.3, 0.5, 0.8],
                                                                   CRUDE_SQRT_V))))
    out = tmp_path / "p.json"
    assert main(["permute", "--summaries", str(d), "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["kind"] == "crude" and doc["p_value"] == 0.015625
    sim = tmp_path / "s.json"
    assert main(["simulate-result1", "--sigma2", "9", "--n-per-arm", "10", "--num-pairs", "1000", "--seed", "1",
                 "--output", str(sim)]) == 0
    assert json.loads(sim.read_text())["plim_mle"] < 0


def test_cli_input_errors_exit_one(tmp_path):
    table = _table1_csv(tmp_path)
    bad = _write(tmp_path / "bad.csv", "pair_id,delta,sqrt_v\n1,x,2\n")
    assert main(["analyze", "--summaries", str(bad)]) == 1
    assert main(["analyze", "--summaries", str(table), "--format", "xml"]) == 1
    assert main(["permute", "--summaries", str(table), "--mode", "mc"]) == 1
    assert main(["analyze", "--summaries", str(table), "--estimators", "permutation_mc"]) == 1
    assert main(["simulate-result1", "--sigma2", "9"]) == 1
    assert main(["analyze", "--summaries", str(table), "--data", str(table)]) == 1


def test_cli_numerical_failure_exit_two(tmp_path):
    data, clusters = _patient_csv(tmp_path, duplicate=True)
    assert main(["analyze", "--data", str(data), "--clusters", str(clusters), "--estimators", "first_level"]) == 2
