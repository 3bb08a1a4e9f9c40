"""Design construction for the rescaled household model.

Each active member contributes a gender/age row x = [1{M}, a*1{M}, 1{F}, a*1{F}]
and a truncated-spline row z placed in the member's gender block. A household
week aggregates its n active members into

    Y = y/sqrt(n),  X = sum(x)/sqrt(n),  Z = sum(z)/sqrt(n),
    w_scaled = sqrt(n) * socio dummies,  delta_scaled = sqrt(n) * week dummies,

so the household response regresses on [X | w_scaled | delta_scaled] with
random spline coefficients on Z and residual variance depending on n.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .splines import SplineBasis, eval_truncated, select_knots
from .types import Household, Member, ModelSpec, PanelData, SocioMeta

GENDER_COLUMNS = ("male", "male_age", "female", "female_age")

#Fixed-effect layout when both sexes share one age curve (gender_split off).
POOLED_COLUMNS = ("intercept", "age")


@dataclass(frozen=True)
class IndividualRow:
    """Design contribution of one active member in one week."""

    x: np.ndarray  # length 4
    z: np.ndarray  # length K_M + K_F
    member: Member
    week: int


@dataclass(frozen=True)
class HouseholdRow:
    """One household-week row of the rescaled model."""

    household_id: str
    week: int
    n: int
    Y: float
    X: np.ndarray
    Z: np.ndarray
    w_scaled: np.ndarray
    delta_scaled: np.ndarray


@dataclass(frozen=True)
class VarianceGroup:
    """Residual-variance group of household-week rows with similar size."""

    label: str
    mean_size: float
    n_rows: int


@dataclass(frozen=True)
class DesignSet:
    """Stacked household rows with full column metadata.

    Fixed-effect columns are ordered gender block, socio dummies, week
    dummies; all-zero columns are dropped and listed in `dropped`.
    """

    y: np.ndarray  # (N,)
    C: np.ndarray  # (N, p) fixed-effect design
    Z: np.ndarray  # (N, q) random-effect design
    sizes: np.ndarray  # (N,) active household size
    group_index: np.ndarray  # (N,) variance-group id
    groups: tuple  # of VarianceGroup
    household_ids: np.ndarray  # (N,) object
    weeks: np.ndarray  # (N,) int
    fixed_names: tuple  # of str, length p
    socio_columns: dict  # (variable, modality code) -> column index
    week_columns: dict  # week -> column index
    bases: dict  # "M"/"F" -> SplineBasis
    z_names: tuple  # of str, length q
    penalty_blocks: tuple  # of (label, start, stop) over Z columns
    dropped: tuple  # of str, columns removed as all-zero
    reference: dict  # socio variable -> reference modality code
    reference_week: int

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_fixed(self) -> int:
        return self.C.shape[1]

    @property
    def n_random(self) -> int:
        return self.Z.shape[1]

    def gender_block(self) -> dict:
        """Column index of each surviving gender/age column."""
        base = GENDER_COLUMNS + POOLED_COLUMNS
        return {name: i for i, name in enumerate(self.fixed_names) if name in base}


def individual_row(member: Member, week: int, bases: dict) -> IndividualRow:
    """x and z rows for one member-week; the member must be active.

    With a "pooled" basis both sexes share x = [1, a] and one spline block;
    otherwise x = [1{M}, a*1{M}, 1{F}, a*1{F}] and z has per-gender blocks.
    """
    if not member.is_active(week):
        raise ValidationError(
            f"member {member.member_id!r} is inactive (age < 1) in week {week}"
        )
    age = member.age_years(week)
    if "pooled" in bases:
        basis = bases["pooled"]
        x = np.array([1.0, age])
        z = eval_truncated(age, basis)
        return IndividualRow(x=x, z=z, member=member, week=week)
    x = np.zeros(4)
    if member.sex == "M":
        x[0], x[1] = 1.0, age
    else:
        x[2], x[3] = 1.0, age
    basis_m, basis_f = bases["M"], bases["F"]
    z = np.zeros(basis_m.n_knots + basis_f.n_knots)
    if member.sex == "M":
        z[: basis_m.n_knots] = eval_truncated(age, basis_m)
    else:
        z[basis_m.n_knots :] = eval_truncated(age, basis_f)
    return IndividualRow(x=x, z=z, member=member, week=week)


def household_row(
    rows,
    socio_codes,
    week: int,
    reference_week: int,
    socio_meta: SocioMeta,
    n_weeks: int,
    y_total: float = 0.0,
    reference=None,
) -> HouseholdRow:
    """Aggregate one household-week's member rows into a rescaled row.

    `socio_codes` are the household's modality codes that week (one per socio
    variable); `reference` overrides the per-variable reference modalities.
    """
    rows = list(rows)
    if not rows:
        raise ValidationError("household week with no active members has no design row")
    ids = {r.member.household_id for r in rows}
    wk = {r.week for r in rows}
    if len(ids) > 1 or wk != {week}:
        raise ValidationError("member rows must share one household and week")
    n = len(rows)
    root_n = np.sqrt(n)
    X = np.sum([r.x for r in rows], axis=0) / root_n
    Z = np.sum([r.z for r in rows], axis=0) / root_n

    if reference is None:
        reference = dict(zip(socio_meta.variables, socio_meta.reference))
    w = np.zeros(sum(m - 1 for m in socio_meta.n_modalities))
    offset = 0
    for q, var in enumerate(socio_meta.variables):
        m_q = socio_meta.n_modalities[q]
        code = int(socio_codes[q])
        ref = reference[var]
        if code != ref:
            dummies = [m for m in range(1, m_q + 1) if m != ref]
            w[offset + dummies.index(code)] = root_n
        offset += m_q - 1

    delta = np.zeros(n_weeks - 1)
    if week != reference_week:
        dummies = [t for t in range(1, n_weeks + 1) if t != reference_week]
        delta[dummies.index(week)] = root_n

    return HouseholdRow(
        household_id=rows[0].member.household_id,
        week=week,
        n=n,
        Y=y_total / root_n,
        X=X,
        Z=Z,
        w_scaled=w,
        delta_scaled=delta,
    )


def pooled_distinct_ages(panel: PanelData, sex: str | None = None) -> np.ndarray:
    """Distinct fractional ages of active member-weeks, pooled over the panel
    year; restricted to one sex when given."""
    ages = [
        member.age_years(week)
        for household in panel.households
        for member in household.members
        if sex is None or member.sex == sex
        for week in range(1, panel.n_weeks + 1)
        if member.is_active(week)
    ]
    return np.unique(np.asarray(ages, dtype=float))


def build_bases(panel: PanelData, spec: ModelSpec) -> dict:
    """Knot selection from pooled distinct ages, per gender or shared."""
    if not spec.gender_split:
        basis = select_knots(pooled_distinct_ages(panel), spec.max_knots, label="pooled")
        return {"pooled": basis}
    return {
        sex: select_knots(pooled_distinct_ages(panel, sex), spec.max_knots, label=sex)
        for sex in ("M", "F")
    }


def assemble(panel: PanelData, spec: ModelSpec, bases: dict | None = None) -> DesignSet:
    """Stack every household-week with >= 1 active member into a DesignSet.

    Rows are ordered by household_id then week. All-zero fixed columns
    (unobserved modalities, weeks, or an absent gender) are dropped and
    recorded; an unobserved reference modality is re-pointed to the most
    frequent observed one with a warning.
    """
    meta = panel.socio_meta
    if bases is None:
        bases = build_bases(panel, spec)
    reference = _resolve_reference(panel, spec, meta)
    reference_week = spec.reference_week
    if not 1 <= reference_week <= panel.n_weeks:
        raise ValidationError(
            f"reference week {reference_week} outside 1..{panel.n_weeks}"
        )

    rows = []
    skipped_positive = 0
    for household in panel.households:
        y_series = panel.intakes[household.household_id].y
        for week in range(1, panel.n_weeks + 1):
            members = [m for m in household.members if m.is_active(week)]
            if not members:
                if y_series[week - 1] > 0:
                    skipped_positive += 1
                continue
            member_rows = [individual_row(m, week, bases) for m in members]
            rows.append(
                household_row(
                    member_rows,
                    household.socio[week - 1],
                    week,
                    reference_week,
                    meta,
                    panel.n_weeks,
                    y_total=float(y_series[week - 1]),
                    reference=reference,
                )
            )
    if skipped_positive:
        warnings.warn(
            f"{skipped_positive} household-weeks have positive intake but no active "
            "member; those intakes are not modelled",
            stacklevel=2,
        )
    if not rows:
        raise ValidationError("panel yields no household-week rows with active members")

    n_rows = len(rows)
    y = np.array([r.Y for r in rows])
    sizes = np.array([r.n for r in rows], dtype=int)
    household_ids = np.array([r.household_id for r in rows], dtype=object)
    weeks = np.array([r.week for r in rows], dtype=int)

    gender_names = list(POOLED_COLUMNS if "pooled" in bases else GENDER_COLUMNS)
    n_gender = len(gender_names)
    socio_names = []
    for q, var in enumerate(meta.variables):
        m_q = meta.n_modalities[q]
        socio_names.extend(f"{var}={m}" for m in range(1, m_q + 1) if m != reference[var])
    week_names = [f"week={t}" for t in range(1, panel.n_weeks + 1) if t != reference_week]
    fixed_names = gender_names + socio_names + week_names

    C = np.zeros((n_rows, len(fixed_names)))
    for i, r in enumerate(rows):
        C[i, :n_gender] = r.X
        C[i, n_gender : n_gender + len(socio_names)] = r.w_scaled
        C[i, n_gender + len(socio_names) :] = r.delta_scaled

    keep = np.flatnonzero(np.any(C != 0.0, axis=0))
    dropped = tuple(fixed_names[j] for j in range(C.shape[1]) if j not in set(keep))
    if dropped:
        warnings.warn(f"dropping all-zero design columns: {', '.join(dropped)}", stacklevel=2)
        C = C[:, keep]
        fixed_names = [fixed_names[j] for j in keep]

    socio_columns, week_columns = {}, {}
    for j, name in enumerate(fixed_names):
        if name.startswith("week="):
            week_columns[int(name.split("=")[1])] = j
        elif "=" in name:
            var, code = name.split("=")
            socio_columns[(var, int(code))] = j

    Z = np.array([r.Z for r in rows]) if bases_size(bases) else np.zeros((n_rows, 0))
    z_names = tuple(
        f"{basis.label}_knot{k + 1}"
        for basis in (
            (bases["pooled"],) if "pooled" in bases else (bases["M"], bases["F"])
        )
        for k in range(basis.n_knots)
    )
    q_all = Z.shape[1]
    if "pooled" in bases or spec.shared_penalty or q_all == 0:
        penalty_blocks = (("u", 0, q_all),) if q_all else ()
    else:
        k_m = bases["M"].n_knots
        penalty_blocks = tuple(
            blk for blk in (("u_M", 0, k_m), ("u_F", k_m, q_all)) if blk[2] > blk[1]
        )

    group_index, groups = _variance_groups(sizes, spec)

    return DesignSet(
        y=y,
        C=C,
        Z=Z,
        sizes=sizes,
        group_index=group_index,
        groups=groups,
        household_ids=household_ids,
        weeks=weeks,
        fixed_names=tuple(fixed_names),
        socio_columns=socio_columns,
        week_columns=week_columns,
        bases=dict(bases),
        z_names=z_names,
        penalty_blocks=penalty_blocks,
        dropped=dropped,
        reference=reference,
        reference_week=reference_week,
    )


def bases_size(bases: dict) -> int:
    if "pooled" in bases:
        return bases["pooled"].n_knots
    return bases["M"].n_knots + bases["F"].n_knots


def design_frame(design: DesignSet):
    """Dump the design as a table for `kdem fit --dump-design`."""
    import pandas as pd

    data = {
        "household_id": design.household_ids,
        "week": design.weeks,
        "n_active": design.sizes,
        "variance_group": [design.groups[g].label for g in design.group_index],
        "y_rescaled": design.y,
    }
    frame = pd.DataFrame(data)
    for j, name in enumerate(design.fixed_names):
        frame[f"C:{name}"] = design.C[:, j]
    for j, name in enumerate(design.z_names):
        frame[f"Z:{name}"] = design.Z[:, j]
    return frame


def _resolve_reference(panel: PanelData, spec: ModelSpec, meta: SocioMeta) -> dict:
    reference = dict(zip(meta.variables, meta.reference))
    if spec.socio_reference:
        reference.update(spec.socio_reference)
    observed = {var: set() for var in meta.variables}
    for household in panel.households:
        for week in range(1, panel.n_weeks + 1):
            if household.active_size(week) == 0:
                continue
            for q, var in enumerate(meta.variables):
                observed[var].add(int(household.socio[week - 1, q]))
    for q, var in enumerate(meta.variables):
        ref = reference[var]
        if not 1 <= ref <= meta.n_modalities[q]:
            raise ValidationError(
                f"reference modality {ref} for {var!r} outside 1..{meta.n_modalities[q]}"
            )
        if ref not in observed[var]:
            counts = {}
            for household in panel.households:
                for week in range(1, panel.n_weeks + 1):
                    if household.active_size(week) == 0:
                        continue
                    code = int(household.socio[week - 1, q])
                    counts[code] = counts.get(code, 0) + 1
            new_ref = max(sorted(counts), key=counts.get)
            warnings.warn(
                f"reference modality {ref} of {var!r} never observed; "
                f"using most frequent modality {new_ref} instead",
                stacklevel=3,
            )
            reference[var] = new_ref
    return reference


def _variance_groups(sizes: np.ndarray, spec: ModelSpec):
    """Group rows by capped household size; pool groups below the row floor.

    Groups start as capped size 1..max_group_size (the top group pools all
    n >= max_group_size). Any group with fewer than min_group_rows rows is
    merged into the adjacent smaller-size group (the smallest merges upward).
    """
    capped = np.minimum(sizes, spec.max_group_size)
    present = sorted(set(capped.tolist()))
    members = {n: [n] for n in present}  # group anchor -> capped sizes pooled in
    counts = {n: int(np.sum(capped == n)) for n in present}

    anchors = sorted(members)
    for n in sorted(anchors, reverse=True):
        if counts[n] < spec.min_group_rows:
            smaller = [m for m in members if m < n]
            if smaller:
                target = max(smaller)
                members[target].extend(members.pop(n))
                counts[target] += counts.pop(n)
    # The smallest group has no smaller neighbour; merge it upward if thin.
    anchors = sorted(members)
    if len(anchors) > 1 and counts[anchors[0]] < spec.min_group_rows:
        first, second = anchors[0], anchors[1]
        members[second].extend(members.pop(first))
        counts[second] += counts.pop(first)

    group_index = np.zeros(sizes.shape[0], dtype=int)
    groups = []
    for gid, anchor in enumerate(sorted(members)):
        pooled = sorted(members[anchor])
        mask = np.isin(capped, pooled)
        group_index[mask] = gid
        top = max(pooled)
        label_top = f"{top}+" if top == spec.max_group_size else f"{top}"
        label = f"{min(pooled)}" if len(pooled) == 1 and top != spec.max_group_size else (
            f"{min(pooled)}-{label_top}" if len(pooled) > 1 else label_top
        )
        groups.append(
            VarianceGroup(
                label=label,
                mean_size=float(np.mean(sizes[mask])),
                n_rows=int(np.sum(mask)),
            )
        )
    return group_index, tuple(groups)
