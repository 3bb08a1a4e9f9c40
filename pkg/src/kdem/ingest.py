"""Loading and validation of the panel input files.

A panel directory holds five comma-separated files with header rows (UTF-8):

    households.csv    household_id,week,income,region,occupation,education
    members.csv       household_id,member_id,sex,birth_week
    purchases.csv     household_id,week,food_group,quantity_kg
    contamination.csv food_group,mean,min,max,sd,n_analyses
    bodyweight.csv    sex,age_min_years,age_max_years,median_kg

plus an optional `socio_labels.json` sidecar mapping each socio variable to
modality labels and a reference modality code. Household intake series are the
cross product of weekly purchase quantities and mean contamination levels.

Contamination unit: the mean level column is read as mg per kg of food
(equivalently ug per g) by default; intakes come out in ug per week. Pass
``unit="ug_per_kg"`` for tables expressed in ug per kg.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ValidationError
from .types import (
    MAX_HOUSEHOLD_SIZE,
    SOCIO_VARIABLES,
    Household,
    IntakeSeriesHousehold,
    Member,
    PanelData,
    SocioMeta,
)

HOUSEHOLDS_FILE = "households.csv"
MEMBERS_FILE = "members.csv"
PURCHASES_FILE = "purchases.csv"
CONTAMINATION_FILE = "contamination.csv"
BODYWEIGHT_FILE = "bodyweight.csv"
SOCIO_LABELS_FILE = "socio_labels.json"

#: The four files load_panel requires; body weights are loaded separately for
#: the exposure stage.
PANEL_FILES = (HOUSEHOLDS_FILE, MEMBERS_FILE, PURCHASES_FILE, CONTAMINATION_FILE)

CONTAMINATION_UNITS = ("mg_per_kg", "ug_per_kg")

# ug of contaminant per kg of food, per unit of the mean-level column.
_UNIT_SCALE = {"mg_per_kg": 1000.0, "ug_per_kg": 1.0}

# Body-weight brackets must cover this age range for each sex.
BODYWEIGHT_AGE_SPAN = (1.0, 110.0)


@dataclass(frozen=True)
class PurchaseRecord:
    """One purchase row: a quantity of a food group in a given week."""

    household_id: str
    week: int
    food_group: str
    quantity_kg: float


@dataclass(frozen=True)
class ContaminationTable:
    """Mean contamination level per food group.

    `levels` maps food group -> mean level in the table's unit; `stats` keeps
    the optional min/max/sd/n columns for reporting.
    """

    levels: dict
    unit: str = "mg_per_kg"
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.unit not in CONTAMINATION_UNITS:
            raise ValidationError(f"unknown contamination unit {self.unit!r}")

    def ug_per_kg_food(self, food_group: str) -> float:
        """Mean level converted to ug of contaminant per kg of food."""
        if food_group not in self.levels:
            raise ValidationError(f"no contamination level for food group {food_group!r}")
        return self.levels[food_group] * _UNIT_SCALE[self.unit]


@dataclass(frozen=True)
class BodyWeightTable:
    """Median body weight (kg) by sex and age bracket [age_min, age_max)."""

    brackets: dict  # sex -> list of (age_min, age_max, median_kg), sorted

    def weight_for(self, sex: str, age_years: float) -> float:
        for lo, hi, kg in self.brackets.get(sex, ()):
            if lo <= age_years < hi:
                return kg
        raise ValidationError(f"no body-weight bracket for sex={sex!r}, age={age_years:.2f}")


@dataclass
class ValidationReport:
    """Outcome of validating a panel directory."""

    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def render(self) -> str:
        lines = []
        for key, value in self.stats.items():
            lines.append(f"  {key}: {value}")
        for msg in self.warnings:
            lines.append(f"WARNING: {msg}")
        for msg in self.errors:
            lines.append(f"ERROR: {msg}")
        lines.append("validation " + ("passed" if self.ok else f"failed ({len(self.errors)} errors)"))
        return "\n".join(lines)


def household_intake(purchases, table: ContaminationTable, n_weeks: int) -> IntakeSeriesHousehold:
    """Weekly intake series of one household: sum of quantity x mean level.

    Weeks without purchases are explicit zeros. All records must belong to the
    same household; output is in ug/week.
    """
    records = list(purchases)
    ids = {rec.household_id for rec in records}
    if len(ids) > 1:
        raise ValidationError(f"purchase records span several households: {sorted(ids)}")
    household_id = ids.pop() if ids else ""
    y = np.zeros(n_weeks)
    for rec in records:
        y[rec.week - 1] += rec.quantity_kg * table.ug_per_kg_food(rec.food_group)
    return IntakeSeriesHousehold(household_id=household_id, y=y)


def load_contamination(path, unit: str = "mg_per_kg") -> ContaminationTable:
    """Read contamination.csv; optional min/max/sd/n columns may be blank."""
    frame = pd.read_csv(path)
    _require_columns(frame, ["food_group", "mean"], path)
    errors = []
    levels, stats = {}, {}
    for idx, row in frame.iterrows():
        line = idx + 2
        group = str(row["food_group"])
        mean = float(row["mean"])
        if not np.isfinite(mean) or mean < 0:
            errors.append(f"{path}:{line}: mean level for {group!r} must be >= 0, got {mean}")
            continue
        extra = {
            key: float(row[key])
            for key in ("min", "max", "sd", "n_analyses")
            if key in frame.columns and pd.notna(row[key])
        }
        lo, hi = extra.get("min"), extra.get("max")
        if lo is not None and lo > mean:
            errors.append(f"{path}:{line}: min > mean for {group!r}")
        if hi is not None and hi < mean:
            errors.append(f"{path}:{line}: max < mean for {group!r}")
        levels[group] = mean
        stats[group] = extra
    if errors:
        raise ValidationError("\n".join(errors))
    if not levels:
        raise ValidationError(f"{path}: no food groups")
    return ContaminationTable(levels=levels, unit=unit, stats=stats)


def load_bodyweight(path) -> BodyWeightTable:
    """Read bodyweight.csv and check the brackets tile ages 1..110 per sex."""
    frame = pd.read_csv(path)
    _require_columns(frame, ["sex", "age_min_years", "age_max_years", "median_kg"], path)
    errors = []
    brackets = {}
    for idx, row in frame.iterrows():
        line = idx + 2
        sex = str(row["sex"])
        lo, hi, kg = float(row["age_min_years"]), float(row["age_max_years"]), float(row["median_kg"])
        if sex not in ("M", "F"):
            errors.append(f"{path}:{line}: sex must be 'M' or 'F', got {sex!r}")
            continue
        if kg <= 0:
            errors.append(f"{path}:{line}: median_kg must be positive, got {kg}")
        if hi <= lo:
            errors.append(f"{path}:{line}: empty age bracket [{lo}, {hi})")
        brackets.setdefault(sex, []).append((lo, hi, kg))
    span_lo, span_hi = BODYWEIGHT_AGE_SPAN
    for sex in ("M", "F"):
        rows = sorted(brackets.get(sex, []))
        if not rows:
            errors.append(f"{path}: no brackets for sex {sex!r}")
            continue
        if rows[0][0] > span_lo or rows[-1][1] < span_hi:
            errors.append(
                f"{path}: {sex} brackets cover [{rows[0][0]}, {rows[-1][1]}), need [{span_lo}, {span_hi})"
            )
        for (_, prev_hi, _), (next_lo, _, _) in zip(rows, rows[1:]):
            if next_lo != prev_hi:
                errors.append(f"{path}: {sex} brackets have a gap or overlap at age {next_lo}")
        brackets[sex] = rows
    if errors:
        raise ValidationError("\n".join(errors))
    return BodyWeightTable(brackets=brackets)


def load_panel(directory, unit: str = "mg_per_kg") -> PanelData:
    """Load and validate the four panel files of a directory.

    Raises ValidationError carrying every detected problem. The returned panel
    has one intake series per household (explicit zeros for purchase-free
    weeks) and every household has at least one active member in some week.
    """
    report, panel = _load_and_validate(Path(directory), unit)
    if not report.ok:
        raise ValidationError("\n".join(report.errors))
    return panel


def validate_directory(directory, unit: str = "mg_per_kg") -> ValidationReport:
    """Validate a panel directory without raising; used by `kdem validate`."""
    report, _ = _load_and_validate(Path(directory), unit)
    return report


def _load_and_validate(directory: Path, unit: str):
    report = ValidationReport()
    missing = [name for name in PANEL_FILES if not (directory / name).exists()]
    if missing:
        report.errors.extend(f"missing input file: {directory / name}" for name in missing)
        return report, None

    try:
        table = load_contamination(directory / CONTAMINATION_FILE, unit=unit)
    except ValidationError as exc:
        report.errors.append(str(exc))
        table = None

    hh_path = directory / HOUSEHOLDS_FILE
    members_path = directory / MEMBERS_FILE
    purchases_path = directory / PURCHASES_FILE
    try:
        hh_frame = pd.read_csv(hh_path)
        members_frame = pd.read_csv(members_path)
        purchases_frame = pd.read_csv(purchases_path)
    except (ValueError, OSError) as exc:
        report.errors.append(f"failed to parse input files: {exc}")
        return report, None

    _require_columns(hh_frame, ["household_id", "week", *SOCIO_VARIABLES], hh_path, report)
    _require_columns(members_frame, ["household_id", "member_id", "sex", "birth_week"], members_path, report)
    _require_columns(purchases_frame, ["household_id", "week", "food_group", "quantity_kg"], purchases_path, report)
    if report.errors:
        return report, None

    hh_frame["household_id"] = hh_frame["household_id"].astype(str)
    members_frame["household_id"] = members_frame["household_id"].astype(str)
    members_frame["member_id"] = members_frame["member_id"].astype(str)
    purchases_frame["household_id"] = purchases_frame["household_id"].astype(str)

    if hh_frame.empty:
        report.errors.append(f"{hh_path}: no household-week rows")
        return report, None

    n_weeks = int(hh_frame["week"].max())
    known_households = set(hh_frame["household_id"])

    # households.csv: every household covers every week exactly once.
    dup = hh_frame.duplicated(subset=["household_id", "week"])
    for idx in hh_frame.index[dup]:
        report.errors.append(f"{hh_path}:{idx + 2}: duplicate (household_id, week) row")
    counts = hh_frame.groupby("household_id")["week"].agg(["count", "min", "max"])
    bad_cover = counts[(counts["count"] != n_weeks) | (counts["min"] != 1) | (counts["max"] != n_weeks)]
    for hid in bad_cover.index:
        report.errors.append(
            f"{hh_path}: household {hid!r} does not cover weeks 1..{n_weeks} exactly once"
        )
    for var in SOCIO_VARIABLES:
        bad = hh_frame.index[(hh_frame[var] < 1) | ~np.isfinite(hh_frame[var].astype(float))]
        for idx in bad:
            report.errors.append(f"{hh_path}:{idx + 2}: {var} code must be a positive integer")

    # members.csv: unique ids, known households, valid sex.
    for idx in members_frame.index[members_frame.duplicated(subset=["member_id"])]:
        report.errors.append(f"{members_path}:{idx + 2}: duplicate member_id")
    orphan = ~members_frame["household_id"].isin(known_households)
    for idx in members_frame.index[orphan]:
        row = members_frame.loc[idx]
        report.errors.append(
            f"{members_path}:{idx + 2}: member {row['member_id']!r} references "
            f"unknown household {row['household_id']!r}"
        )
    bad_sex = ~members_frame["sex"].isin(["M", "F"])
    for idx in members_frame.index[bad_sex]:
        report.errors.append(f"{members_path}:{idx + 2}: sex must be 'M' or 'F'")

    # purchases.csv: nonnegative quantities, known groups and households, valid weeks.
    qty = purchases_frame["quantity_kg"].astype(float)
    for idx in purchases_frame.index[(qty < 0) | ~np.isfinite(qty)]:
        report.errors.append(
            f"{purchases_path}:{idx + 2}: quantity_kg must be >= 0, "
            f"got {purchases_frame.loc[idx, 'quantity_kg']}"
        )
    if table is not None:
        unknown = sorted(set(purchases_frame["food_group"].astype(str)) - set(table.levels))
        if unknown:
            report.errors.append(
                "purchases reference food groups absent from the contamination table: "
                + ", ".join(repr(g) for g in unknown)
            )
    for idx in purchases_frame.index[~purchases_frame["household_id"].isin(known_households)]:
        report.errors.append(
            f"{purchases_path}:{idx + 2}: unknown household "
            f"{purchases_frame.loc[idx, 'household_id']!r}"
        )
    weeks = purchases_frame["week"].astype(int)
    for idx in purchases_frame.index[(weeks < 1) | (weeks > n_weeks)]:
        report.errors.append(
            f"{purchases_path}:{idx + 2}: week {purchases_frame.loc[idx, 'week']} outside 1..{n_weeks}"
        )

    if report.errors:
        return report, None

    socio_meta = _socio_meta(hh_frame, directory / SOCIO_LABELS_FILE, report)

    households, intakes = [], {}
    members_by_household = {
        hid: group for hid, group in members_frame.groupby("household_id", sort=True)
    }
    purchases_by_household = {
        hid: group for hid, group in purchases_frame.groupby("household_id", sort=True)
    }
    n_active_members = 0
    for hid, hh_rows in hh_frame.groupby("household_id", sort=True):
        socio = np.zeros((n_weeks, len(SOCIO_VARIABLES)), dtype=np.int16)
        ordered = hh_rows.sort_values("week")
        for q, var in enumerate(SOCIO_VARIABLES):
            socio[ordered["week"].to_numpy() - 1, q] = ordered[var].to_numpy()

        member_rows = members_by_household.get(hid)
        members = []
        if member_rows is not None:
            for _, row in member_rows.sort_values("member_id").iterrows():
                members.append(
                    Member(
                        member_id=row["member_id"],
                        household_id=hid,
                        sex=row["sex"],
                        birth_week=int(row["birth_week"]),
                    )
                )
        if len(members) > MAX_HOUSEHOLD_SIZE:
            report.errors.append(
                f"household {hid!r} has {len(members)} members, cap is {MAX_HOUSEHOLD_SIZE}"
            )
            continue
        household = Household(household_id=hid, members=tuple(members), socio=socio)
        active_weeks = sum(household.active_size(t) > 0 for t in range(1, n_weeks + 1))
        if active_weeks == 0:
            report.errors.append(
                f"household {hid!r} has no member aged >= 1 in any week; remove it from the panel"
            )
            continue
        n_active_members += sum(
            any(m.is_active(t) for t in range(1, n_weeks + 1)) for m in members
        )

        rows = purchases_by_household.get(hid)
        records = []
        if rows is not None:
            records = [
                PurchaseRecord(
                    household_id=hid,
                    week=int(row["week"]),
                    food_group=str(row["food_group"]),
                    quantity_kg=float(row["quantity_kg"]),
                )
                for _, row in rows.iterrows()
            ]
        households.append(household)
        intakes[hid] = household_intake(records, table, n_weeks)

    report.stats.update(
        {
            "households": len(households),
            "members": int(len(members_frame)),
            "active members": n_active_members,
            "weeks": n_weeks,
            "purchase rows": int(len(purchases_frame)),
            "food groups": len(table.levels),
        }
    )
    if report.errors:
        return report, None

    panel = PanelData(
        n_weeks=n_weeks,
        households=tuple(households),
        intakes=intakes,
        socio_meta=socio_meta,
    )
    return report, panel


def _socio_meta(hh_frame, labels_path: Path, report: ValidationReport) -> SocioMeta:
    labels, reference = {}, {}
    if labels_path.exists():
        with open(labels_path, encoding="utf-8") as fh:
            sidecar = json.load(fh)
        for var, entry in sidecar.items():
            if var not in SOCIO_VARIABLES:
                report.warnings.append(f"{labels_path}: unknown socio variable {var!r} ignored")
                continue
            labels[var] = list(entry.get("labels", []))
            if "reference" in entry:
                reference[var] = int(entry["reference"])

    n_modalities, refs = [], []
    for var in SOCIO_VARIABLES:
        observed = int(hh_frame[var].max())
        m_q = max(observed, len(labels.get(var, [])))
        n_modalities.append(m_q)
        ref = reference.get(var, m_q)
        if not 1 <= ref <= m_q:
            report.errors.append(f"reference modality {ref} for {var!r} outside 1..{m_q}")
            ref = m_q
        refs.append(ref)
    return SocioMeta(
        variables=SOCIO_VARIABLES,
        n_modalities=tuple(n_modalities),
        labels=labels,
        reference=tuple(refs),
    )


def _require_columns(frame, columns, path, report: ValidationReport | None = None):
    missing = [c for c in columns if c not in frame.columns]
    if not missing:
        return
    msg = f"{path}: missing columns {missing}"
    if report is None:
        raise ValidationError(msg)
    report.errors.append(msg)
