"""CSV ingestion and validation: units, intake aggregation, panel checks."""

import json

import numpy as np
import pytest

from kdem.errors import ValidationError
from kdem.ingest import (
    PANEL_FILES,
    BodyWeightTable,
    PurchaseRecord,
    household_intake,
    load_bodyweight,
    load_contamination,
    load_panel,
    validate_directory,
)


@pytest.fixture()
def table(tmp_path):
    path = tmp_path / "contamination.csv"
    path.write_text(
        "food_group,mean,min,max,sd,n_analyses\n"
        "Fish,0.147,0.003,2.45,0.235,2832\n"
        "Mollusks and crustaceans,0.014,0.001,0.18,0.02,817\n"
    )
    return load_contamination(path)


@pytest.fixture()
def weights(tmp_path):
    path = tmp_path / "bodyweight.csv"
    rows = ["sex,age_min_years,age_max_years,median_kg"]
    for sex in ("M", "F"):
        rows += [f"{sex},1,3,14", f"{sex},3,10,25", f"{sex},10,18,50", f"{sex},18,110,70"]
    path.write_text("\n".join(rows) + "\n")
    return load_bodyweight(path)


class TestContamination:
    def test_default_unit_scales_mg_per_kg_to_ug(self, table):
        # 1 kg of fish at 0.147 mg/kg means 147 ug of contaminant
        assert table.ug_per_kg_food("Fish") == pytest.approx(147.0, rel=1e-12)

    def test_ug_per_kg_unit_passthrough(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("food_group,mean\nFish,147\n")
        t = load_contamination(path, unit="ug_per_kg")
        assert t.ug_per_kg_food("Fish") == pytest.approx(147.0)

    def test_unknown_unit_rejected(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("food_group,mean\nFish,0.1\n")
        with pytest.raises(ValidationError, match="unit"):
            load_contamination(path, unit="lbs")

    def test_negative_mean_rejected(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("food_group,mean\nFish,-0.1\n")
        with pytest.raises(ValidationError):
            load_contamination(path)

    def test_mean_outside_min_max_rejected(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("food_group,mean,min,max\nFish,0.5,0.6,2.0\n")
        with pytest.raises(ValidationError):
            load_contamination(path)

    def test_unknown_food_group_lookup(self, table):
        with pytest.raises(ValidationError, match="Beef"):
            table.ug_per_kg_food("Beef")


class TestBodyWeight:
    def test_bracket_lookup(self, weights):
        assert weights.weight_for("M", 2.0) == 14.0
        assert weights.weight_for("F", 30.0) == 70.0

    def test_bracket_boundary_belongs_to_upper(self, weights):
        # brackets are [lo, hi): age exactly 3 falls in the 3-10 bracket
        assert weights.weight_for("M", 3.0) == 25.0

    def test_age_outside_coverage(self, weights):
        with pytest.raises(ValidationError, match="M"):
            weights.weight_for("M", 0.5)

    def test_gap_in_brackets_rejected(self, tmp_path):
        path = tmp_path / "bw.csv"
        path.write_text(
            "sex,age_min_years,age_max_years,median_kg\n"
            "M,1,3,14\nM,5,110,70\nF,1,110,60\n"
        )
        with pytest.raises(ValidationError, match="[Gg]ap|cover"):
            load_bodyweight(path)

    def test_overlap_rejected(self, tmp_path):
        path = tmp_path / "bw.csv"
        path.write_text(
            "sex,age_min_years,age_max_years,median_kg\n"
            "M,1,5,14\nM,3,110,70\nF,1,110,60\n"
        )
        with pytest.raises(ValidationError):
            load_bodyweight(path)

    def test_nonpositive_weight_rejected(self, tmp_path):
        path = tmp_path / "bw.csv"
        path.write_text(
            "sex,age_min_years,age_max_years,median_kg\nM,1,110,0\nF,1,110,60\n"
        )
        with pytest.raises(ValidationError):
            load_bodyweight(path)


class TestHouseholdIntake:
    def test_sums_quantity_times_level(self, table):
        records = [
            PurchaseRecord("h1", 1, "Fish", 1.0),
            PurchaseRecord("h1", 1, "Mollusks and crustaceans", 2.0),
            PurchaseRecord("h1", 3, "Fish", 0.5),
        ]
        series = household_intake(records, table, n_weeks=4)
        np.testing.assert_allclose(series.y, [147.0 + 28.0, 0.0, 73.5, 0.0], rtol=1e-12)

    def test_empty_weeks_are_zero(self, table):
        series = household_intake([], table, n_weeks=3)
        np.testing.assert_array_equal(series.y, [0.0, 0.0, 0.0])

    def test_multiple_households_rejected(self, table):
        records = [PurchaseRecord("h1", 1, "Fish", 1.0), PurchaseRecord("h2", 1, "Fish", 1.0)]
        with pytest.raises(ValidationError, match="several households"):
            household_intake(records, table, n_weeks=2)


class TestPanelValidation:
    def test_valid_directory_loads(self, panel_dir):
        panel = load_panel(panel_dir)
        assert panel.n_weeks == 53
        assert len(panel.households) == 15
        report = validate_directory(panel_dir)
        assert report.ok, report.render()

    def test_roundtrip_intakes_match(self, panel_dir, year_panel):
        original, _ = year_panel
        loaded = load_panel(panel_dir)
        for hh_orig in original.households:
            y_orig = np.maximum(original.intakes[hh_orig.household_id].y, 0.0)
            y_loaded = loaded.intakes[hh_orig.household_id].y
            np.testing.assert_allclose(y_loaded, y_orig, rtol=1e-9, atol=1e-9)

    def test_missing_files_listed(self, tmp_path):
        report = validate_directory(tmp_path)
        assert not report.ok
        text = report.render()
        for name in PANEL_FILES:
            assert name in text

    def test_duplicate_household_week_detected(self, panel_dir, tmp_path):
        broken = tmp_path / "dup"
        broken.mkdir()
        for name in panel_dir.iterdir():
            (broken / name.name).write_text(name.read_text())
        hh = broken / "households.csv"
        lines = hh.read_text().splitlines()
        lines.append(lines[1])  # repeat the first data row
        hh.write_text("\n".join(lines) + "\n")
        report = validate_directory(broken)
        assert not report.ok
        assert "duplicate" in report.render().lower()

    def test_unknown_food_group_is_error_with_line(self, panel_dir, tmp_path):
        broken = tmp_path / "ufg"
        broken.mkdir()
        for name in panel_dir.iterdir():
            (broken / name.name).write_text(name.read_text())
        pur = broken / "purchases.csv"
        with pur.open("a") as fh:
            fh.write("H01,1,Dragonfruit,1.0\n")
        report = validate_directory(broken)
        assert not report.ok
        assert "Dragonfruit" in report.render()

    def test_negative_quantity_rejected(self, panel_dir, tmp_path):
        broken = tmp_path / "neg"
        broken.mkdir()
        for name in panel_dir.iterdir():
            (broken / name.name).write_text(name.read_text())
        pur = broken / "purchases.csv"
        with pur.open("a") as fh:
            fh.write("H01,1,Fish,-0.5\n")
        report = validate_directory(broken)
        assert not report.ok

    def test_orphan_member_rejected(self, panel_dir, tmp_path):
        broken = tmp_path / "orphan"
        broken.mkdir()
        for name in panel_dir.iterdir():
            (broken / name.name).write_text(name.read_text())
        mem = broken / "members.csv"
        with mem.open("a") as fh:
            fh.write("HZZ,HZZm1,M,-1000\n")
        report = validate_directory(broken)
        assert not report.ok
        assert "HZZ" in report.render()

    def test_week_gap_rejected(self, panel_dir, tmp_path):
        broken = tmp_path / "gap"
        broken.mkdir()
        for name in panel_dir.iterdir():
            (broken / name.name).write_text(name.read_text())
        hh = broken / "households.csv"
        lines = [
            line
            for line in hh.read_text().splitlines()
            if not line.startswith("H01,2,")
        ]
        hh.write_text("\n".join(lines) + "\n")
        report = validate_directory(broken)
        assert not report.ok

    def test_socio_labels_read(self, panel_dir):
        labels = json.loads((panel_dir / "socio_labels.json").read_text())
        panel = load_panel(panel_dir)
        assert tuple(panel.socio_meta.variables) == ("income", "region", "occupation", "education")
        assert set(labels) >= set(panel.socio_meta.variables)
