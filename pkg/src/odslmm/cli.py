"""Command-line front end.

Subcommands: simulate (replication studies), design (calibrate a sampling
design on a cohort file), sample (draw sampling indicators), fit (single-shot
ML/CD/MI analyses), report (re-emit a saved study report). Exit codes:
0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import acl, design as design_mod, mi, simulate
from .cohort_io import CohortFormatError, read_cohort, write_cohort
from .design import DesignSpec, InfeasibleDesignError, SummarySpec
from .lmm import Cohort, fit_ml


class UsageError(ValueError):
    """Invalid configuration or input file; maps to exit code 2."""


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}")
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})")


def _load_design(path: str) -> DesignSpec:
    doc = _load_json(path)
    try:
        return DesignSpec.from_dict(doc.get("design", doc))
    except (KeyError, ValueError, TypeError) as err:
        raise UsageError(f"{path}: invalid design spec ({err})")


def _load_cohort(args) -> Cohort:
    mean_cov = None
    if getattr(args, "mean_covariates", None):
        mean_cov = tuple(s for s in args.mean_covariates.split(",") if s)
    try:
        return read_cohort(args.cohort, exposure_col=args.exposure_col, mean_covariates=mean_cov)
    except FileNotFoundError:
        raise UsageError(f"file not found: {args.cohort}")
    except CohortFormatError as err:
        raise UsageError(str(err))


def _print_estimate_table(rows: list[tuple[str, float, Optional[float]]]) -> None:
    width = max(len(r[0]) for r in rows)
    print(f"{'parameter'.ljust(width)}  {'estimate':>12}  {'std_err':>12}")
    for name, est, se in rows:
        se_txt = f"{se:12.6g}" if se is not None and math.isfinite(se) else " " * 12
        print(f"{name.ljust(width)}  {est:12.6g}  {se_txt}")


def cmd_simulate(args) -> int:
    if args.config:
        doc = _load_json(args.config)
    elif args.preset:
        doc = {"scenario": args.preset}
    else:
        raise UsageError("one of --config or --preset is required")
    if args.seed is not None:
        doc["master_seed"] = args.seed
    if args.replications is not None:
        doc["replications"] = args.replications
    if args.imputations is not None:
        doc["m_imputations"] = args.imputations
    try:
        config = simulate.StudyConfig.from_dict(doc)
    except (ValueError, TypeError) as err:
        raise UsageError(f"invalid study config: {err}")

    study = simulate.run_study(config, threads=args.threads)
    report = study.report
    stem = Path(args.output)
    json_path = stem.with_suffix(".json")
    csv_path = stem.with_suffix(".csv")
    _write_json(json_path, report.to_dict())
    _write_csv(csv_path, report.to_csv_rows())
    print(report.format_table())
    print(f"\nreport written to {json_path} and {csv_path}")
    return 0


def cmd_design(args) -> int:
    cohort = _load_cohort(args)
    summary = SummarySpec(args.summary)
    targets = [float(x) for x in args.targets.split(",")]
    n = len(cohort)
    doc: dict = {"n_cohort": n, "summary": args.summary}

    if summary.kind == "bivariate":
        if args.target_mass is None:
            raise UsageError("--target-mass is required for the bivariate summary")
        if len(targets) != 2:
            raise UsageError("bivariate designs take 2 targets: central,outer")
        central = design_mod.bivariate_central_region(cohort, summary, args.target_mass)
        inside = np.array(
            [central.contains(design_mod.compute_summary(s, summary)) for s in cohort]
        )
        masses = (float(inside.mean()), float(1.0 - inside.mean()))
        pi = design_mod.calibrate_probabilities(masses, targets, n)
        spec = design_mod.central_complement_design(central, tuple(pi))
        doc["region_masses"] = list(masses)
    else:
        percentiles = [float(x) for x in args.percentiles.split(",")]
        if len(percentiles) != 2 or len(targets) != 3:
            raise UsageError("scalar designs take 2 percentiles and 3 targets: low,central,high")
        cutoffs = design_mod.empirical_cutoffs(cohort, summary, percentiles)
        qs = np.array([design_mod.compute_summary(s, summary)[0] for s in cohort])
        counts = [
            int(np.sum(qs <= cutoffs[0])),
            int(np.sum((qs > cutoffs[0]) & (qs <= cutoffs[1]))),
            int(np.sum(qs > cutoffs[1])),
        ]
        masses = [c / n for c in counts]
        pi = design_mod.calibrate_probabilities(masses, targets, n)
        spec = design_mod.three_region_design(summary, cutoffs, tuple(pi))
        doc["cutoffs"] = [float(c) for c in cutoffs]
        doc["region_masses"] = masses
        doc["region_counts"] = counts

    doc["design"] = spec.to_dict()
    doc["targets"] = targets
    doc["expected_counts"] = [
        float(p * m * n) for p, m in zip(spec.probabilities, doc["region_masses"])
    ]
    out = Path(args.output)
    _write_json(out, doc)
    print(f"probabilities: {[round(p, 6) for p in spec.probabilities]}")
    print(f"design written to {out}")
    return 0


def cmd_sample(args) -> int:
    cohort = _load_cohort(args)
    spec = _load_design(args.design)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    flags = design_mod.draw_sample(cohort, spec, rng, exact=args.exact)
    sampled = cohort.with_sampling(flags, mask_exposure=not args.keep_exposure)
    write_cohort(args.output, sampled)
    print(f"sampled {int(flags.sum())} of {len(cohort)} subjects; wrote {args.output}")
    return 0


def cmd_fit(args) -> int:
    cohort = _load_cohort(args)
    analysis = args.analysis
    if analysis in ("cd", "cdmi") and not args.design:
        raise UsageError(f"--design is required for analysis {analysis!r} (correction undefined)")
    spec = _load_design(args.design) if args.design else None

    has_flags = any(s.sampled is not None for s in cohort)
    if not has_flags:
        # No sampling indicators: ascertained subjects are the sampled set.
        cohort = cohort.with_sampling(
            [s.exposure is not None for s in cohort], mask_exposure=False
        )
    n_excluded = len(cohort) - len(cohort.sampled_subjects())

    out_doc: dict
    rows: list[tuple[str, float, Optional[float]]]
    if analysis == "ml":
        fit = fit_ml(cohort, subset=lambda s: s.exposure is not None)
        out_doc = fit.to_dict()
        rows = [(k, v[0], v[1]) for k, v in fit.natural_estimates().items()]
    elif analysis == "cd":
        if n_excluded:
            print(f"excluded {n_excluded} subjects without ascertained exposure")
        fit = acl.fit_cd(cohort, spec)
        out_doc = fit.to_dict()
        rows = [(k, v[0], v[1]) for k, v in fit.natural_estimates().items()]
    elif analysis in ("cdmi", "dmi"):
        rng = np.random.default_rng(np.random.SeedSequence(args.seed))
        pooled = mi.run_mi_analysis(cohort, spec, analysis, args.imputations, rng)
        out_doc = pooled.to_dict()
        names = pooled.names or tuple(f"p{k}" for k in range(pooled.estimates.size))
        rows = [
            (name, float(est), float(se))
            for name, est, se in zip(names, pooled.estimates, pooled.se())
        ]
        if args.per_imputation_output:
            per_rows = [["imputation", *names]]
            for m, draw in enumerate(pooled.per_imputation, start=1):
                per_rows.append([m, *[float(v) for v in draw]])
            _write_csv(Path(args.per_imputation_output), per_rows)
            print(f"per-imputation estimates written to {args.per_imputation_output}")
    else:
        raise UsageError(f"unknown analysis {analysis!r}")

    out_doc["analysis"] = analysis
    out_doc["seed"] = args.seed
    if args.output:
        if args.format == "json":
            _write_json(Path(args.output), out_doc)
        else:
            _write_csv(
                Path(args.output),
                [["parameter", "estimate", "std_err"]]
                + [[r[0], r[1], r[2]] for r in rows],
            )
        print(f"results written to {args.output}")
    _print_estimate_table(rows)
    return 0


def cmd_report(args) -> int:
    doc = _load_json(args.input)
    if "cells" not in doc:
        raise UsageError(f"{args.input}: not a study report (no 'cells' field)")
    report = simulate.EfficiencyReport(
        scenario=doc["scenario"],
        config_hash=doc["config_hash"],
        master_seed=doc["master_seed"],
        replications=doc["replications"],
        m_imputations=doc["m_imputations"],
        designs=tuple(doc["designs"]),
        analyses=tuple(doc["analyses"]),
        parameters=tuple(doc["parameters"]),
        baseline=tuple(doc["baseline"]),
        cells=doc["cells"],
    )
    if args.format == "csv":
        if not args.output:
            raise UsageError("--output is required with --format csv")
        _write_csv(Path(args.output), report.to_csv_rows())
        print(f"csv written to {args.output}")
    elif args.format == "json":
        if args.output:
            _write_json(Path(args.output), report.to_dict())
            print(f"json written to {args.output}")
        else:
            print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    else:
        print(report.format_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odslmm",
        description="Outcome-dependent subsampling designs and analyses for longitudinal cohorts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a replication study")
    p_sim.add_argument("--config", help="StudyConfig JSON file")
    p_sim.add_argument("--preset", help="scenario preset name (a-e)")
    p_sim.add_argument("--seed", type=int, default=None, help="master seed override")
    p_sim.add_argument("--replications", type=int, default=None)
    p_sim.add_argument("--imputations", type=int, default=None)
    p_sim.add_argument("--threads", type=int, default=1, help="worker process cap")
    p_sim.add_argument("--output", default="report", help="output path stem")
    p_sim.set_defaults(func=cmd_simulate)

    p_des = sub.add_parser("design", help="calibrate a design on a cohort file")
    p_des.add_argument("--cohort", required=True)
    p_des.add_argument("--summary", choices=design_mod.SUMMARY_KINDS, required=True)
    p_des.add_argument("--percentiles", default="0.12,0.88", help="two tail percentiles")
    p_des.add_argument("--target-mass", type=float, default=None, help="central mass (bivariate)")
    p_des.add_argument("--targets", required=True, help="expected counts per region")
    p_des.add_argument("--exposure-col", default=None)
    p_des.add_argument("--output", default="design.json")
    p_des.set_defaults(func=cmd_design)

    p_smp = sub.add_parser("sample", help="draw sampling indicators under a design")
    p_smp.add_argument("--cohort", required=True)
    p_smp.add_argument("--design", required=True)
    p_smp.add_argument("--seed", type=int, default=0)
    p_smp.add_argument("--exact", action="store_true", help="fixed per-region counts")
    p_smp.add_argument("--keep-exposure", action="store_true",
                       help="do not blank exposure of unsampled subjects")
    p_smp.add_argument("--exposure-col", default=None)
    p_smp.add_argument("--output", required=True)
    p_smp.set_defaults(func=cmd_sample)

    p_fit = sub.add_parser("fit", help="fit one analysis to a cohort file")
    p_fit.add_argument("--cohort", required=True)
    p_fit.add_argument("--analysis", choices=("ml", "cd", "cdmi", "dmi"), required=True)
    p_fit.add_argument("--design", default=None)
    p_fit.add_argument("--imputations", type=int, default=25)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--exposure-col", default=None)
    p_fit.add_argument("--mean-covariates", default=None,
                       help="comma list of cheap covariates in the mean model")
    p_fit.add_argument("--output", default=None)
    p_fit.add_argument("--format", choices=("json", "csv"), default="json")
    p_fit.add_argument("--per-imputation-output", default=None,
                       help="CSV of per-imputation estimates (MI analyses)")
    p_fit.set_defaults(func=cmd_fit)

    p_rep = sub.add_parser("report", help="re-emit a saved study report")
    p_rep.add_argument("--input", required=True)
    p_rep.add_argument("--format", choices=("table", "json", "csv"), default="table")
    p_rep.add_argument("--output", default=None)
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InfeasibleDesignError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"runtime error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
