"""Command-line entry point: ``paircal {analyze, diagnose, permute, simulate-result1}``.

Exit codes: 0 success, 1 input/configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zipfile
from io import BytesIO
from pathlib import Path

import numpy as np

from .analysis import AnalysisConfig, InputMode, run_analysis
from .core import SummaryKind, crude_summaries
from .errors import ConfigError, InputError, NumericalError
from .io import file_digest, load_patient_csv, load_summary_data
from .permutation import Mode, permute_exact, permute_monte_carlo
from .report import FORMATS, emit_report
from .result1 import Result1Config, plim_mle, simulate_mle

def _add_inputs(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("input")
    g.add_argument("--data", help="patient-level CSV (pair_id, role, outcome, covariates...)")
    g.add_argument("--clusters", help="cluster CSV (pair_id, role, n_served)")
    g.add_argument("--schema", help="JSON covariate schema overriding column-type inference")
    g.add_argument("--summaries", help="per-pair summary CSV (pair_id, delta, sqrt_v|variance, kind)")
    p.add_argument("--config", help="JSON analysis config; flags override its values")


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--output", "-o", help="output file (csv-bundle: directory); default stdout")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paircal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate the average intervention effect")
    _add_inputs(a)
    _add_output(a)
    a.add_argument("--calibration", dest="calibration", action="store_true", default=None)
    a.add_argument("--no-calibration", dest="calibration", action="store_false")
    a.add_argument("--estimators", help="comma-separated subset of first_level,two_level,profile,bayes,"
                                        "permutation_exact,permutation_mc ('' for none)")
    a.add_argument("--link", choices=("identity", "logit"))
    a.add_argument("--covariance-mode", choices=("diagonal", "full"))
    a.add_argument("--sandwich", choices=("HC0", "HC1", "cluster"))
    a.add_argument("--seed", type=int)
    a.add_argument("--mc-draws", type=int)
    a.add_argument("--outcome-range", type=float, nargs=2, metavar=("LOW", "HIGH"))
    a.add_argument("--permutation-refit", action="store_true", default=None)

    d = sub.add_parser("diagnose", help="covariate imbalance and delta/variance dependence")
    _add_inputs(d)
    _add_output(d)
    d.add_argument("--pooled-t", action="store_true", help="pooled-variance t instead of Welch")

    p = sub.add_parser("permute", help="within-pair randomization test")
    _add_inputs(p)
    p.add_argument("--kind", choices=("crude", "calibrated"), default=None)
    p.add_argument("--statistic", choices=("mean", "two_level_mle"), default="mean")
    p.add_argument("--mode", choices=("exact", "mc"), default="exact")
    p.add_argument("--mc-draws", type=int, default=10_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o")

    s = sub.add_parser("simulate-result1", help="weighted-MLE inconsistency under a true null")
    s.add_argument("--sigma2", type=float)
    s.add_argument("--n-per-arm", type=int)
    s.add_argument("--num-pairs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="JSON with any of sigma2, n_per_arm, num_pairs, seed")
    s.add_argument("--output", "-o")
    return parser


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _load_input(args, config_data: dict):
    if bool(args.data) == bool(args.summaries):
        raise ConfigError("give exactly one of --data or --summaries")
    digests = {}
    if args.data:
        for label, path in (("data", args.data), ("clusters", args.clusters), ("schema", args.schema)):
            if path:
                try:
                    digests[label] = file_digest(path)
                except OSError as exc:
                    raise InputError(f"cannot read {path}: {exc.strerror}") from exc
        return InputMode.PATIENT, load_patient_csv(args.data, args.clusters, args.schema), digests
    try:
        digests["summaries"] = file_digest(args.summaries)
    except OSError as exc:
        raise InputError(f"cannot read {args.summaries}: {exc.strerror}") from exc
    return InputMode.SUMMARY, load_summary_data(args.summaries), digests


def _write(data: bytes, output: str | None, fmt: str = "json") -> None:
    if fmt == "csv-bundle" and output:
        out = Path(output)
        out.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(BytesIO(data)) as zf:
            for name in zf.namelist():
                (out / name).write_bytes(zf.read(name))
        return
    if output:
        Path(output).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _analysis_config(args, config_data: dict, mode: InputMode, diagnose_only: bool = False) -> AnalysisConfig:
    data = {k: v for k, v in config_data.items() if k != "format"}
    data["mode"] = mode.value
    overrides = {}
    if not diagnose_only:
        if args.estimators is not None:
            overrides["estimators"] = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
        for name in ("calibration", "link", "covariance_mode", "sandwich", "seed", "mc_draws",
                     "permutation_refit"):
            value = getattr(args, name)
            if value is not None:
                overrides[name] = value
        if args.outcome_range is not None:
            overrides["outcome_range"] = tuple(args.outcome_range)
    else:
        overrides["estimators"] = ()
        overrides["welch"] = not args.pooled_t
    data.update(overrides)
    if "calibration" not in data:
        data["calibration"] = mode is InputMode.PATIENT
    return AnalysisConfig.from_dict(data)


def _cmd_analyze(args, diagnose_only: bool = False) -> None:
    config_data = _load_config(args.config)
    mode, data, digests = _load_input(args, config_data)
    config = _analysis_config(args, config_data, mode, diagnose_only)
    report = run_analysis(data, config, digests)
    fmt = args.format or config_data.get("format") or ("text" if diagnose_only else "json")
    _write(emit_report(report, fmt), args.output, fmt)


def _cmd_permute(args) -> None:
    config_data = _load_config(args.config)
    mode, data, _ = _load_input(args, config_data)
    if args.mode == "mc" and args.seed is None:
        raise ConfigError("--seed is required for Monte Carlo permutation")
    if mode is InputMode.PATIENT:
        from .calibration import calibrate_study
        from .glm import build_design, fit

        kind = args.kind or "calibrated"
        if kind == "crude":
            summaries = crude_summaries(data)
        else:
            summaries = list(calibrate_study(data, fit(build_design(data))).deltas)
    else:
        by_kind = data.by_kind()
        kind = args.kind or ("calibrated" if SummaryKind.CALIBRATED in by_kind else "crude")
        if SummaryKind(kind) not in by_kind:
            raise InputError(f"no {kind} summaries in input")
        summaries = by_kind[SummaryKind(kind)]
    deltas = [s.delta for s in summaries]
    variances = [s.variance for s in summaries]
    if args.mode == "exact":
        result = permute_exact(deltas, args.statistic, variances=variances)
    else:
        result = permute_monte_carlo(deltas, args.statistic, n_draws=args.mc_draws, seed=args.seed,
                                     variances=variances)
    doc = {"kind": kind, **result.to_dict()}
    if result.mode is Mode.EXACT:
        doc["p_fraction"] = str(result.p_fraction)
    _write((json.dumps(doc, indent=2) + "\n").encode(), args.output)


def _cmd_simulate(args) -> None:
    cfg = _load_config(args.config)
    values = {"sigma2": args.sigma2, "n_per_arm": args.n_per_arm, "num_pairs": args.num_pairs, "seed": args.seed}
    for key, value in values.items():
        if value is None:
            values[key] = cfg.get(key)
    if values["num_pairs"] is None:
        values["num_pairs"] = 100_000
    missing = [k for k in ("sigma2", "n_per_arm", "seed") if values[k] is None]
    if missing:
        raise ConfigError(f"simulate-result1 needs {', '.join('--' + m.replace('_', '-') for m in missing)}")
    config = Result1Config(sigma2=float(values["sigma2"]), n_per_arm=int(values["n_per_arm"]),
                           num_pairs=int(values["num_pairs"]), seed=int(values["seed"]))
    sim = simulate_mle(config)
    doc = {
        "sigma2": config.sigma2,
        "n_per_arm": config.n_per_arm,
        "num_pairs": config.num_pairs,
        "seed": config.seed,
        "plim_mle": plim_mle(config),
        "estimate": sim.estimate,
        "mc_se": sim.mc_se,
        "unweighted_mean": sim.unweighted_mean,
        "unweighted_se": sim.unweighted_se,
    }
    _write((json.dumps(doc, indent=2) + "\n").encode(), args.output)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors are input errors; keep exit code 2 for numerical failures
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "analyze":
            _cmd_analyze(args)
        elif args.command == "diagnose":
            _cmd_analyze(args, diagnose_only=True)
        elif args.command == "permute":
            _cmd_permute(args)
        else:
            _cmd_simulate(args)
    except (InputError, ValueError, KeyError) as exc:
        print(f"paircal: error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"paircal: numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
