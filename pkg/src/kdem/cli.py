"""Command-line pipeline.

Subcommands: validate, simulate, fit, test, decompose, expose, report.
Exit codes: 0 success, 1 validation failure, 2 numerical failure, 64 usage.
Given the same inputs and seed, every output file is byte-identical across
runs. KDEM_THREADS caps the linear-algebra worker count (best effort).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .design import assemble, build_bases, design_frame
from .errors import ConvergenceError, DecompositionError, KdemError, ValidationError
from .exposure import (
    apply_corrections,
    default_burn_in,
    kdem_series,
    percentile_curves,
    reference_exposure,
    relative_dose,
    risk_indices,
    summary_to_dict,
)
from .inference import (
    LinearHypothesis,
    f_test,
    hierarchical_merge,
    lrt,
    lrt_boundary,
    parse_hypothesis,
    test_rho_zero,
)
from .ingest import (
    BODYWEIGHT_FILE,
    CONTAMINATION_UNITS,
    load_bodyweight,
    load_panel,
    validate_directory,
)
from .io import fit_from_dict, save_fit, spec_from_dict
from .reml import decompose_variance, fit_reml, predict_individual
from .synth import TruthConfig, generate, truth_config_from_dict, write_panel
from .types import Contaminant, METHYLMERCURY, ModelSpec

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    """argparse with the pipeline's usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cap_threads():
    value = os.environ.get("KDEM_THREADS")
    if not value:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_val = sub.add_parser("validate", parents=[_unit_parent()],
                           help="check a panel directory and print a report")
    p_val.add_argument("directory")

    p_sim = sub.add_parser("simulate", help="write a synthetic panel with known truth")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--config", help="truth configuration JSON")
    p_sim.add_argument("--households", type=int)
    p_sim.add_argument("--weeks", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--sigma-eps2", type=float, dest="sigma_eps2")
    p_sim.add_argument("--rho", type=float)

    p_fit = sub.add_parser("fit", parents=[_unit_parent(), _spec_parent()],
                           help="estimate the decomposition model")
    p_fit.add_argument("directory")
    p_fit.add_argument("--out", required=True, help="fit JSON path")
    p_fit.add_argument("--method", choices=["REML", "ML"], default="REML")
    p_fit.add_argument("--dump-design", help="write the stacked design as CSV")
    p_fit.add_argument("--dump-basis", help="write knots as CSV (sex,k,knot)")
    p_fit.add_argument("--dump-tables", help="prefix for effect/variance tables")

    p_test = sub.add_parser("test", help="hypothesis tests on a saved fit")
    p_test.add_argument("fit", help="fit JSON from `kdem fit`")
    p_test.add_argument("--hypotheses", help="CSV with columns label,constraint")
    p_test.add_argument("--data", help="panel directory (needed for structural tests)")
    p_test.add_argument("--boundary", action="store_true",
                        help="test the smoothing variance against 0 (needs --data)")
    p_test.add_argument("--gender", action="store_true",
                        help="test equal male/female age curves (needs --data)")
    p_test.add_argument("--merge", action="store_true",
                        help="run the modality-merging procedure (needs --data)")
    p_test.add_argument("--out", help="output CSV (default: print)")
    p_test.add_argument("--contamination-unit", choices=list(CONTAMINATION_UNITS),
                        default="mg_per_kg")

    p_dec = sub.add_parser("decompose",
                           help="split group variances into sigma_eps2 and rho")
    p_dec.add_argument("fit", help="fit JSON from `kdem fit`")
    p_dec.add_argument("--out", help="output JSON (default: print)")
    p_dec.add_argument("--strict", action="store_true",
                       help="fail when 1 + (n-1) rho <= 0 for an observed size")

    p_exp = sub.add_parser("expose", parents=[_unit_parent(), _exposure_parent()],
                           help="body burden and risk indices from a fit")
    p_exp.add_argument("fit", help="fit JSON from `kdem fit`")
    p_exp.add_argument("directory", help="panel directory (with bodyweight.csv)")
    p_exp.add_argument("--out", required=True, help="risk JSON path")
    p_exp.add_argument("--curves", help="percentile curves CSV path")

    p_rep = sub.add_parser(
        "report", parents=[_unit_parent(), _spec_parent(), _exposure_parent()],
        help="full pipeline: fit, tests, decomposition, exposure, curves")
    p_rep.add_argument("directory")
    p_rep.add_argument("--out", required=True, help="output directory")

    return parser


def _unit_parent():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--contamination-unit", choices=list(CONTAMINATION_UNITS),
                        default="mg_per_kg",
                        help="unit of the contamination table's mean column")
    return parent


def _spec_parent():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--max-knots", type=int, default=35)
    parent.add_argument("--no-gender-split", action="store_true",
                        help="one pooled age curve for both sexes")
    parent.add_argument("--separate-penalty", action="store_true",
                        help="one smoothing variance per gender")
    parent.add_argument("--reference-week", type=int, default=1)
    parent.add_argument("--max-group-size", type=int, default=6)
    parent.add_argument("--min-group-rows", type=int, default=10)
    return parent


def _exposure_parent():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--half-life", type=float, default=METHYLMERCURY.half_life_weeks,
                        help="contaminant half-life in weeks")
    parent.add_argument("--ptwi", type=float, default=METHYLMERCURY.ptwi,
                        help="tolerable weekly intake, ug/kg bw")
    parent.add_argument("--burn-in", type=int, help="override the 6-half-life burn-in")
    parent.add_argument("--outside", type=float,
                        help="outside-home consumption share (inflates intakes)")
    parent.add_argument("--edible", type=float,
                        help="edible fraction of purchases (deflates intakes)")
    return parent


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "validate": cmd_validate,
        "simulate": cmd_simulate,
        "fit": cmd_fit,
        "test": cmd_test,
        "decompose": cmd_decompose,
        "expose": cmd_expose,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, DecompositionError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except KdemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def cmd_validate(args) -> int:
    report = validate_directory(args.directory, unit=args.contamination_unit)
    print(report.render())
    return EXIT_OK if report.ok else EXIT_VALIDATION


def cmd_simulate(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = truth_config_from_dict(json.load(fh))
    else:
        config = TruthConfig()
    overrides = {}
    if args.households is not None:
        overrides["n_households"] = args.households
    if args.weeks is not None:
        overrides["n_weeks"] = args.weeks
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.sigma_eps2 is not None:
        overrides["sigma_eps2"] = args.sigma_eps2
    if args.rho is not None:
        overrides["rho"] = args.rho
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    panel, truth = generate(config)
    clamped = write_panel(panel, args.out, truth=truth)
    print(f"wrote synthetic panel to {args.out}: {config.n_households} households, "
          f"{config.n_weeks} weeks, {clamped} negative weeks clamped")
    return EXIT_OK


def _spec_from_args(args) -> ModelSpec:
    return ModelSpec(
        gender_split=not args.no_gender_split,
        shared_penalty=not args.separate_penalty,
        max_group_size=args.max_group_size,
        reference_week=args.reference_week,
        max_knots=args.max_knots,
        min_group_rows=args.min_group_rows,
    )


def cmd_fit(args) -> int:
    panel = load_panel(args.directory, unit=args.contamination_unit)
    spec = _spec_from_args(args)
    bases = build_bases(panel, spec)
    design = assemble(panel, spec, bases=bases)
    fit = fit_reml(design, spec, method=args.method)
    save_fit(fit, args.out, spec=spec)
    if args.dump_design:
        design_frame(design).to_csv(args.dump_design, index=False)
    if args.dump_basis:
        with open(args.dump_basis, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sex", "k", "knot"])
            for key, basis in sorted(design.bases.items()):
                for k, knot in enumerate(basis.knots, start=1):
                    writer.writerow([basis.label, k, format(float(knot), ".17g")])
    if args.dump_tables:
        _write_effect_table(fit, Path(f"{args.dump_tables}_effects.csv"), panel)
        _write_variance_table(fit, Path(f"{args.dump_tables}_variance.csv"))
    print(f"fit: {design.n_rows} rows, {design.n_fixed} fixed effects, "
          f"{design.n_random} spline coefficients")
    print(f"{args.method} log-likelihood {fit.loglik:.6f}, "
          f"converged={fit.converged} (iterations {fit.n_iter}, "
          f"gradient {fit.grad_norm:.2e})")
    for (label, _, _), value in zip(design.penalty_blocks, fit.sigma_u2):
        suffix = " [pinned at 0]" if label in fit.pinned else ""
        print(f"smoothing variance {label} = {value:.6g}{suffix}")
    for group, value in zip(design.groups, fit.sigma_n2):
        print(f"residual variance, size {group.label} ({group.n_rows} rows) = {value:.6g}")
    return EXIT_OK


def cmd_test(args) -> int:
    with open(args.fit, encoding="utf-8") as fh:
        payload = json.load(fh)
    fit = fit_from_dict(payload)
    reports = []

    if args.hypotheses:
        with open(args.hypotheses, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                if "constraint" not in row or "label" not in row:
                    raise ValidationError(
                        "hypotheses CSV needs columns 'label' and 'constraint'"
                    )
                hyp = parse_hypothesis(row["constraint"], fit.design, label=row["label"])
                reports.append(f_test(fit, hyp))

    needs_data = args.boundary or args.gender or args.merge
    if needs_data and not args.data:
        raise ValidationError("--boundary/--gender/--merge need --data <panel dir>")
    if needs_data:
        spec = spec_from_dict(payload)
        if spec is None:
            raise ValidationError(
                "fit file carries no model options; refit with `kdem fit` to use "
                "structural tests"
            )
        panel = load_panel(args.data, unit=args.contamination_unit)
        if args.boundary:
            reports.append(_boundary_report(panel, spec))
        if args.gender:
            reports.append(_gender_report(panel, spec))
        if args.merge:
            merged = hierarchical_merge(panel, spec)
            for step in merged.trail:
                print(f"merged {step.variable}={step.modality} into "
                      f"{step.merged_into} (p = {step.p_value:.4f})")
            reports.extend(merged.reports)

    if not reports:
        raise ValidationError("nothing to test: give --hypotheses or a structural flag")
    _emit_reports(reports, args.out)
    return EXIT_OK


def _boundary_report(panel, spec):
    design_full = assemble(panel, spec)
    fit_full = fit_reml(design_full, spec)
    from dataclasses import replace

    spec0 = replace(spec, max_knots=0)
    design_null = assemble(panel, spec0)
    fit_null = fit_reml(design_null, spec0)
    return lrt_boundary(fit_full, fit_null, label="smoothing variance = 0")


def _gender_report(panel, spec):
    from dataclasses import replace

    fit_split = fit_reml(assemble(panel, spec), spec, method="ML")
    spec_pooled = replace(spec, gender_split=False)
    fit_pooled = fit_reml(assemble(panel, spec_pooled), spec_pooled, method="ML")
    df = (fit_split.design.n_fixed - fit_pooled.design.n_fixed) + (
        len(fit_split.sigma_u2) - len(fit_pooled.sigma_u2)
    )
    return lrt(fit_split, fit_pooled, df=max(df, 1), label="equal age curves by sex")


def _emit_reports(reports, out_path):
    fieldnames = ["label", "method", "statistic", "df", "p_value", "reject_5pct"]
    rows = [rep.row() for rep in reports]
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                row = dict(row)
                row["statistic"] = format(row["statistic"], ".17g")
                row["p_value"] = format(row["p_value"], ".17g")
                writer.writerow(row)
    else:
        for row in rows:
            print(f"{row['label']}: {row['method']} statistic "
                  f"{row['statistic']:.4f} (df {row['df']}), "
                  f"p = {row['p_value']:.4g}"
                  + (" -> reject at 5%" if row["reject_5pct"] else ""))


def cmd_decompose(args) -> int:
    with open(args.fit, encoding="utf-8") as fh:
        payload = json.load(fh)
    fit = fit_from_dict(payload)
    decomp = decompose_variance(
        fit.sigma_n2,
        counts=[g.n_rows for g in fit.design.groups],
        sizes=[g.mean_size for g in fit.design.groups],
        strict=args.strict,
    )
    rho_report = test_rho_zero(decomp)
    result = {
        "sigma_eps2": decomp.sigma_eps2,
        "se_sigma_eps2": decomp.se_sigma_eps2,
        "rho": decomp.rho,
        "se_rho": decomp.se_rho,
        "intercept": decomp.intercept,
        "slope": decomp.slope,
        "positive_definite": decomp.positive_definite,
        "rho_zero_test": {
            "statistic": rho_report.statistic,
            "p_value": rho_report.p_value,
            "reject_5pct": rho_report.reject,
        },
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"individual variance sigma_eps2 = {decomp.sigma_eps2:.6g} "
          f"(se {decomp.se_sigma_eps2:.3g})")
    print(f"within-household correlation rho = {decomp.rho:.4f} "
          f"(se {decomp.se_rho:.3g}), rho=0 p-value {rho_report.p_value:.4g}")
    if not decomp.positive_definite:
        print("note: implied row variance is not positive for every observed size")
    return EXIT_OK


def cmd_expose(args) -> int:
    with open(args.fit, encoding="utf-8") as fh:
        payload = json.load(fh)
    fit = fit_from_dict(payload)
    panel = load_panel(args.directory, unit=args.contamination_unit)
    bodyweight = load_bodyweight(Path(args.directory) / BODYWEIGHT_FILE)
    contaminant = Contaminant("contaminant", half_life_weeks=args.half_life,
                              ptwi=args.ptwi)
    print(f"reference burden S_ref = {reference_exposure(contaminant):.2f} ug/kg bw "
          f"(half-life {contaminant.half_life_weeks:g} weeks, "
          f"tolerable weekly intake {contaminant.ptwi:g})")
    summary, curves = _run_exposure(
        fit, panel, bodyweight, contaminant, args.burn_in,
        args.outside, args.edible,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(summary_to_dict(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.curves:
        curves.to_csv(args.curves, index=False, float_format="%.17g")
    long_term = (f"{summary.long_term_risk:.6f}" if summary.long_term_defined
                 else "undefined (panel shorter than burn-in)")
    print(f"long-term risk = {long_term}; share of member-weeks above the "
          f"tolerable intake = {summary.r_ptwi:.6f}")
    return EXIT_OK


def _run_exposure(fit, panel, bodyweight, contaminant, burn_in, outside, edible):
    intakes = predict_individual(fit, panel)
    scenario = "baseline"
    if outside is not None or edible is not None:
        intakes = apply_corrections(
            intakes,
            outside_share=outside or 0.0,
            edible_fraction=edible if edible is not None else 1.0,
        )
        parts = []
        if outside is not None:
            parts.append(f"outside={outside:g}")
        if edible is not None:
            parts.append(f"edible={edible:g}")
        scenario = ",".join(parts)
    doses = relative_dose(intakes, bodyweight)
    if burn_in is None:
        burn_in = default_burn_in(contaminant)
    series = [kdem_series(d, contaminant, burn_in=burn_in) for d in doses]
    summary = risk_indices(series, contaminant, burn_in=burn_in, panel=panel,
                           scenario=scenario)
    curves = percentile_curves(series, contaminant)
    return summary, curves


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel = load_panel(args.directory, unit=args.contamination_unit)
    bodyweight = load_bodyweight(Path(args.directory) / BODYWEIGHT_FILE)
    spec = _spec_from_args(args)
    design = assemble(panel, spec)
    fit = fit_reml(design, spec)
    save_fit(fit, out_dir / "fit.json", spec=spec)
    _write_effect_table(fit, out_dir / "table_effects.csv", panel)
    _write_variance_table(fit, out_dir / "table_variance.csv")
    _write_test_table(fit, panel, spec, out_dir / "table_tests.csv")

    contaminant = Contaminant("contaminant", half_life_weeks=args.half_life,
                              ptwi=args.ptwi)
    outside = args.outside if args.outside is not None else 0.2
    edible = args.edible if args.edible is not None else 0.61
    scenarios = [
        ("baseline", None, None),
        ("outside-home", outside, None),
        ("edible-fraction", None, edible),
        ("both", outside, edible),
    ]
    rows = []
    for name, out_share, ed_frac in scenarios:
        summary, curves = _run_exposure(
            fit, panel, bodyweight, contaminant, args.burn_in, out_share, ed_frac
        )
        if name == "baseline":
            with open(out_dir / "risk.json", "w", encoding="utf-8") as fh:
                json.dump(summary_to_dict(summary), fh, indent=2, sort_keys=True)
                fh.write("\n")
            curves.to_csv(out_dir / "curves.csv", index=False, float_format="%.17g")
        rows.append({
            "scenario": name,
            "long_term_risk": summary.long_term_risk,
            "r_ptwi": summary.r_ptwi,
            "children_1_3_risk": summary.children_risk,
        })
    with open(out_dir / "scenarios.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["scenario", "long_term_risk", "r_ptwi", "children_1_3_risk"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({
                "scenario": row["scenario"],
                "long_term_risk": format(row["long_term_risk"], ".17g"),
                "r_ptwi": format(row["r_ptwi"], ".17g"),
                "children_1_3_risk": format(row["children_1_3_risk"], ".17g"),
            })
    print(f"report written to {out_dir}")
    return EXIT_OK


def _write_effect_table(fit, path, panel):
    """Socio/age/week effect estimates in the effects-table layout."""
    design = fit.design
    se = np.sqrt(np.diag(np.asarray(fit.cov_fixed)))
    labels = panel.socio_meta.labels if panel is not None else {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "modality", "label", "estimate", "se", "p_value"])
        gender = fit.design.gender_block()
        for name, j in sorted(gender.items(), key=lambda kv: kv[1]):
            rep = f_test(fit, _single_column_hypothesis(design, j, name))
            writer.writerow(["age_curve", "", name,
                             format(float(fit.theta[j]), ".17g"),
                             format(float(se[j]), ".17g"),
                             format(rep.p_value, ".17g")])
        for (variable, code), j in sorted(design.socio_columns.items()):
            var_labels = labels.get(variable, [])
            label = var_labels[code - 1] if code <= len(var_labels) else ""
            rep = f_test(fit, _single_column_hypothesis(design, j, f"{variable}={code}"))
            writer.writerow([variable, code, label,
                             format(float(fit.theta[j]), ".17g"),
                             format(float(se[j]), ".17g"),
                             format(rep.p_value, ".17g")])
        for variable, code in sorted(design.reference.items()):
            var_labels = labels.get(variable, [])
            label = var_labels[code - 1] if code <= len(var_labels) else ""
            writer.writerow([variable, code, f"ref: {label}" if label else "ref",
                             "0", "", ""])


def _write_variance_table(fit, path):
    """Variance components in the variance-table layout."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "estimate", "se"])
        for (label, _, _), value in zip(fit.design.penalty_blocks, fit.sigma_u2):
            writer.writerow([f"random effect sd ({label})",
                             format(float(np.sqrt(value)), ".17g"), ""])
        try:
            decomp = decompose_variance(
                fit.sigma_n2,
                counts=[g.n_rows for g in fit.design.groups],
                sizes=[g.mean_size for g in fit.design.groups],
            )
            writer.writerow(["individual variance",
                             format(decomp.sigma_eps2, ".17g"),
                             format(decomp.se_sigma_eps2, ".17g")])
            writer.writerow(["within-household correlation",
                             format(decomp.rho, ".17g"),
                             format(decomp.se_rho, ".17g")])
        except DecompositionError as exc:
            writer.writerow(["individual variance", "undefined", str(exc)])
        for group, value in zip(fit.design.groups, fit.sigma_n2):
            writer.writerow([f"residual variance (size {group.label})",
                             format(float(value), ".17g"), ""])


def _write_test_table(fit, panel, spec, path):
    """Default hypothesis battery in the tests-table layout."""
    design = fit.design
    reports = []
    for variable in panel.socio_meta.variables:
        cols = [j for (var, _), j in sorted(design.socio_columns.items())
                if var == variable]
        if not cols:
            continue
        matrix = np.zeros((len(cols), design.n_fixed))
        for i, j in enumerate(cols):
            matrix[i, j] = 1.0
        hyp = LinearHypothesis(matrix=matrix, label=f"no {variable} effect")
        reports.append(f_test(fit, hyp))
    week_cols = sorted(design.week_columns.values())
    if week_cols:
        matrix = np.zeros((len(week_cols), design.n_fixed))
        for i, j in enumerate(week_cols):
            matrix[i, j] = 1.0
        reports.append(f_test(fit, LinearHypothesis(matrix=matrix, label="no week effect")))
    try:
        reports.append(_boundary_report(panel, spec))
    except (ValidationError, ConvergenceError):
        pass
    if spec.gender_split:
        try:
            reports.append(_gender_report(panel, spec))
        except (ValidationError, ConvergenceError):
            pass
    try:
        decomp = decompose_variance(
            fit.sigma_n2,
            counts=[g.n_rows for g in fit.design.groups],
            sizes=[g.mean_size for g in fit.design.groups],
        )
        reports.append(test_rho_zero(decomp))
    except (DecompositionError, ValidationError):
        pass
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["null_hypothesis", "p_value"])
        for rep in reports:
            writer.writerow([rep.label, format(rep.p_value, ".17g")])


def _single_column_hypothesis(design, column: int, label: str) -> LinearHypothesis:
    row = np.zeros(design.n_fixed)
    row[column] = 1.0
    return LinearHypothesis(matrix=row[None, :], label=label)


if __name__ == "__main__":
    sys.exit(main())
