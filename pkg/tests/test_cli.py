"""End-to-end tests of the command-line interface.

All commands are driven in-process through ``kdem.cli.main`` so exit codes
and console output can be asserted directly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from kdem.cli import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VALIDATION,
    main,
)


# Simulated panels in this module are short (8 weeks), so exposure summaries
# legitimately warn that the long-term index is undefined.
pytestmark = pytest.mark.filterwarnings(
    "ignore:panel has \\d+ weeks, burn-in:UserWarning"
)


def _read(path: Path) -> bytes:
    return path.read_bytes()


def _simulate(out: Path, *, households: int = 30, weeks: int = 8, seed: int = 17) -> int:
    return main(
        [
            "simulate",
            "--out",
            str(out),
            "--households",
            str(households),
            "--weeks",
            str(weeks),
            "--seed",
            str(seed),
        ]
    )


FIT_FLAGS = ["--max-knots", "3", "--min-group-rows", "5"]


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory) -> Path:
    """A simulated panel directory with a fitted model stored alongside it."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    data = root / "data"
    assert _simulate(data) == EXIT_OK
    fit_path = root / "fit.json"
    code = main(["fit", str(data), "--out", str(fit_path), *FIT_FLAGS])
    assert code == EXIT_OK
    return root


# ---------------------------------------------------------------------------
# usage errors
# ---------------------------------------------------------------------------


class TestUsage:
    def test_no_arguments_is_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_subcommand_is_usage_error(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_unknown_flag_is_usage_error(self):
        assert main(["fit", "--bogus"]) == EXIT_USAGE

    def test_missing_required_argument_is_usage_error(self):
        # ``fit`` requires a data directory and --out.
        assert main(["fit"]) == EXIT_USAGE

    def test_bad_choice_is_usage_error(self, tmp_path):
        code = main(
            ["fit", str(tmp_path), "--out", str(tmp_path / "f.json"), "--method", "MAP"]
        )
        assert code == EXIT_USAGE


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


class TestValidate:
    def test_empty_directory_fails_validation(self, tmp_path, capsys):
        code = main(["validate", str(tmp_path)])
        out = capsys.readouterr().out
        assert code == EXIT_VALIDATION
        assert out.count("missing input file") == 4
        assert "validation failed" in out

    def test_complete_directory_passes(self, panel_dir, capsys):
        code = main(["validate", str(panel_dir)])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "validation passed" in out

    def test_simulated_directory_passes(self, pipeline_dir, capsys):
        code = main(["validate", str(pipeline_dir / "data")])
        assert code == EXIT_OK
        assert "validation passed" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


class TestSimulate:
    def test_same_seed_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _simulate(a, seed=42) == EXIT_OK
        assert _simulate(b, seed=42) == EXIT_OK
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        assert {"households.csv", "members.csv", "purchases.csv"} <= set(names)
        for name in names:
            assert _read(a / name) == _read(b / name), name

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _simulate(a, seed=1) == EXIT_OK
        assert _simulate(b, seed=2) == EXIT_OK
        assert _read(a / "purchases.csv") != _read(b / "purchases.csv")

    def test_summary_line(self, tmp_path, capsys):
        assert _simulate(tmp_path / "p", households=12, weeks=6, seed=3) == EXIT_OK
        out = capsys.readouterr().out
        assert "wrote synthetic panel" in out
        assert "12 households" in out
        assert "6 weeks" in out


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


class TestFit:
    def test_fit_writes_loadable_file(self, pipeline_dir):
        payload = json.loads((pipeline_dir / "fit.json").read_text())
        assert payload["converged"] is True
        assert payload["method"] == "REML"
        assert "fixed_effects" in payload and "variance_groups" in payload

    def test_fit_prints_variances(self, pipeline_dir, tmp_path, capsys):
        code = main(
            ["fit", str(pipeline_dir / "data"), "--out", str(tmp_path / "f.json"), *FIT_FLAGS]
        )
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "log-likelihood" in out
        assert "smoothing variance" in out
        assert "residual variance" in out

    def test_fit_missing_data_is_validation_error(self, tmp_path, capsys):
        code = main(["fit", str(tmp_path / "nowhere"), "--out", str(tmp_path / "f.json")])
        assert code == EXIT_VALIDATION
        assert "error" in capsys.readouterr().err.lower()


# ---------------------------------------------------------------------------
# test (hypothesis testing)
# ---------------------------------------------------------------------------


class TestHypotheses:
    def test_nothing_to_test_is_an_error(self, pipeline_dir, capsys):
        code = main(["test", str(pipeline_dir / "fit.json")])
        assert code == EXIT_VALIDATION
        assert "nothing to test" in capsys.readouterr().err

    def test_hypothesis_csv_roundtrip(self, pipeline_dir, tmp_path, capsys):
        hyp = tmp_path / "hyp.csv"
        with hyp.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "constraint"])
            writer.writerow(["income effect", "g1=0"])
            writer.writerow(["income equals education", "g1=g2"])
        out_csv = tmp_path / "tests.csv"
        code = main(
            [
                "test",
                str(pipeline_dir / "fit.json"),
                "--hypotheses",
                str(hyp),
                "--out",
                str(out_csv),
            ]
        )
        assert code == EXIT_OK
        rows = list(csv.DictReader(out_csv.open()))
        assert [r["label"] for r in rows] == ["income effect", "income equals education"]
        for row in rows:
            assert row["method"] == "F"
            p = float(row["p_value"])
            assert 0.0 <= p <= 1.0
            assert row["reject_5pct"] in {"True", "False"}
            assert (p <= 0.05) == (row["reject_5pct"] == "True")

    def test_malformed_hypothesis_csv(self, pipeline_dir, tmp_path, capsys):
        hyp = tmp_path / "hyp.csv"
        hyp.write_text("name,rule\nx,g1=0\n")
        code = main(["test", str(pipeline_dir / "fit.json"), "--hypotheses", str(hyp)])
        assert code == EXIT_VALIDATION

    def test_boundary_needs_data(self, pipeline_dir, capsys):
        code = main(["test", str(pipeline_dir / "fit.json"), "--boundary"])
        assert code == EXIT_VALIDATION
        assert "--data" in capsys.readouterr().err

    def test_boundary_test_runs(self, pipeline_dir, capsys):
        code = main(
            [
                "test",
                str(pipeline_dir / "fit.json"),
                "--boundary",
                "--data",
                str(pipeline_dir / "data"),
            ]
        )
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "smoothing variance = 0" in out


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------


class TestDecompose:
    def test_decompose_reports_parameters(self, pipeline_dir, tmp_path, capsys):
        out_json = tmp_path / "decomp.json"
        code = main(["decompose", str(pipeline_dir / "fit.json"), "--out", str(out_json)])
        capsys.readouterr()
        assert code == EXIT_OK
        payload = json.loads(out_json.read_text())
        for key in (
            "sigma_eps2",
            "se_sigma_eps2",
            "rho",
            "se_rho",
            "intercept",
            "slope",
            "positive_definite",
            "rho_zero_test",
        ):
            assert key in payload
        assert payload["sigma_eps2"] > 0
        assert set(payload["rho_zero_test"]) == {"statistic", "p_value", "reject_5pct"}

    def test_invalid_decomposition_exits_numerical(self, pipeline_dir, tmp_path, capsys):
        # Rewrite the stored group variances so the size trend is so steep
        # that the implied variance for a single-person household is negative.
        payload = json.loads((pipeline_dir / "fit.json").read_text())
        groups = payload["variance_groups"]
        assert len(groups) >= 2
        for i, group in enumerate(groups):
            group["sigma2"] = 100.0 if i == len(groups) - 1 else 1.0
        bad = tmp_path / "bad_fit.json"
        bad.write_text(json.dumps(payload))
        code = main(["decompose", str(bad)])
        err = capsys.readouterr().err
        assert code == EXIT_NUMERICAL
        assert "no valid variance decomposition" in err


# ---------------------------------------------------------------------------
# expose
# ---------------------------------------------------------------------------


class TestExpose:
    def test_expose_writes_risk_and_curves(self, pipeline_dir, tmp_path, capsys):
        risk = tmp_path / "risk.json"
        curves = tmp_path / "curves.csv"
        code = main(
            [
                "expose",
                str(pipeline_dir / "fit.json"),
                str(pipeline_dir / "data"),
                "--out",
                str(risk),
                "--curves",
                str(curves),
            ]
        )
        out = capsys.readouterr().out
        assert code == EXIT_OK
        # Default kinetics: 6-week half-life, tolerable weekly intake 1.6.
        assert "S_ref = 14.67" in out
        payload = json.loads(risk.read_text())
        assert "r_ptwi" in payload
        header = curves.read_text().splitlines()[0]
        assert header == "week,reference,P10,P50,P75,P90,P95,P99,Pmax"

    def test_expose_short_panel_warns_on_stdout(self, pipeline_dir, tmp_path, capsys):
        # The simulated panel is 8 weeks; the default burn-in is 36 weeks, so
        # the long-term index is undefined but the run still succeeds.
        code = main(
            [
                "expose",
                str(pipeline_dir / "fit.json"),
                str(pipeline_dir / "data"),
                "--out",
                str(tmp_path / "risk.json"),
            ]
        )
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "undefined (panel shorter than burn-in)" in out

    def test_expose_invalid_share_is_validation_error(self, pipeline_dir, tmp_path, capsys):
        code = main(
            [
                "expose",
                str(pipeline_dir / "fit.json"),
                str(pipeline_dir / "data"),
                "--out",
                str(tmp_path / "risk.json"),
                "--outside",
                "1.5",
            ]
        )
        capsys.readouterr()
        assert code == EXIT_VALIDATION


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def report_dir(pipeline_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    args = ["report", str(pipeline_dir / "data"), "--out", str(out), *FIT_FLAGS]
    assert main(args) == EXIT_OK
    return out


class TestReport:
    def test_report_writes_all_outputs(self, report_dir):
        expected = {
            "fit.json",
            "table_effects.csv",
            "table_variance.csv",
            "table_tests.csv",
            "risk.json",
            "curves.csv",
            "scenarios.csv",
        }
        assert expected <= {p.name for p in report_dir.iterdir()}

    def test_effect_table_shape(self, report_dir):
        rows = list(csv.DictReader((report_dir / "table_effects.csv").open()))
        assert rows
        assert set(rows[0]) == {"variable", "modality", "label", "estimate", "se", "p_value"}
        variables = {r["variable"] for r in rows}
        assert "age_curve" in variables

    def test_variance_table_shape(self, report_dir):
        rows = list(csv.DictReader((report_dir / "table_variance.csv").open()))
        params = [r["parameter"] for r in rows]
        assert "individual variance" in params
        assert "within-household correlation" in params
        assert any(p.startswith("random effect sd") for p in params)

    def test_scenarios_cover_corrections(self, report_dir):
        rows = list(csv.DictReader((report_dir / "scenarios.csv").open()))
        names = [r["scenario"] for r in rows]
        assert names == ["baseline", "outside-home", "edible-fraction", "both"]
        assert set(rows[0]) == {
            "scenario",
            "long_term_risk",
            "r_ptwi",
            "children_1_3_risk",
        }
