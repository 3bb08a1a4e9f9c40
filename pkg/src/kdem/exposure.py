"""Kinetic dietary exposure: body-weight doses, accumulation, risk indices.

Weekly intakes become doses D (ug per kg body weight per week); the body
burden follows the one-compartment recursion

    S_t = exp(-eta) S_{t-1} + D_t,      eta = ln 2 / half-life,

starting from S_0 = mean of the positive weekly doses. An individual is at
long-term risk when S_t exceeds the reference trajectory (the burden of a
steady dose at exactly the tolerable weekly intake) in any week past the
burn-in of six half-lives. R_ptwi is the share of member-weeks whose dose
exceeds the tolerable weekly intake.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .ingest import BodyWeightTable
from .types import Contaminant, IntakeMatrix, Member, PanelData

#: Age bands (years, right-open) used for risk breakdowns; ages taken at the
#: final panel week. The first band is the young-children group.
AGE_BANDS = ((1.0, 3.0), (3.0, 10.0), (10.0, 18.0), (18.0, 65.0), (65.0, 200.0))


def default_burn_in(contaminant: Contaminant) -> int:
    """Weeks to steady state: six half-lives, rounded up."""
    return int(np.ceil(6.0 * contaminant.half_life_weeks))


@dataclass(frozen=True)
class DoseSeries:
    """Weekly body-weight-relative doses of one member (ug/kg bw/week)."""

    member: Member
    doses: np.ndarray  # (T,)

    def __post_init__(self):
        doses = np.asarray(self.doses, dtype=float)
        object.__setattr__(self, "doses", doses)
        if not np.all(np.isfinite(doses)):
            raise ValidationError(f"doses of {self.member.member_id!r} must be finite")
        if np.any(doses < 0):
            raise ValidationError(f"doses of {self.member.member_id!r} must be >= 0")

    @property
    def n_weeks(self) -> int:
        return self.doses.shape[0]


@dataclass(frozen=True)
class ExposureSeries:
    """Cumulative body burden of one member under the accumulation model."""

    member: Member
    doses: np.ndarray
    series: np.ndarray  # S_t, t = 1..T
    s0: float
    burn_in: int
    at_risk: bool
    first_exceed_week: int | None

    @property
    def n_weeks(self) -> int:
        return self.series.shape[0]


@dataclass(frozen=True)
class RiskSummary:
    """Population risk indices and subgroup breakdowns."""

    scenario: str
    long_term_risk: float
    r_ptwi: float
    long_term_defined: bool
    burn_in: int
    n_members: int
    n_member_weeks: int
    at_risk: dict = field(default_factory=dict)  # member_id -> bool
    first_exceed_week: dict = field(default_factory=dict)
    age_band_risk: dict = field(default_factory=dict)  # "lo-hi" -> (count, risk)
    income_risk: dict = field(default_factory=dict)  # modality code -> (count, risk)

    def __post_init__(self):
        for name, value in (("long_term_risk", self.long_term_risk), ("r_ptwi", self.r_ptwi)):
            if np.isfinite(value) and not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} = {value} outside [0, 1]")

    @property
    def children_risk(self) -> float:
        """Long-term risk among children aged one to three."""
        label = _band_label(*AGE_BANDS[0])
        count, risk = self.age_band_risk.get(label, (0, float("nan")))
        return risk


def relative_dose(intakes: IntakeMatrix, bodyweight: BodyWeightTable) -> list:
    """Clamped predicted intakes divided by the member's median body weight
    for their sex and age bracket each week; inactive weeks dose 0."""
    clamped = intakes.clamped()
    out = []
    for i, member in enumerate(intakes.members):
        doses = np.zeros(intakes.n_weeks)
        for t in range(1, intakes.n_weeks + 1):
            if not intakes.active[i, t - 1]:
                continue
            weight = bodyweight.weight_for(member.sex, member.age_years(t))
            doses[t - 1] = clamped[i, t - 1] / weight
        out.append(DoseSeries(member=member, doses=doses))
    return out


def reference_exposure(contaminant: Contaminant, t: int | None = None, dose: float | None = None) -> float:
    """Body burden of a steady dose at the tolerable weekly intake.

    Without `t`, the steady-state limit d / (1 - exp(-eta)); with `t`, the
    finite-horizon value sum_{s=0..t} d exp(-eta s). `dose` overrides the
    contaminant's tolerable weekly intake.
    """
    d = contaminant.ptwi if dose is None else float(dose)
    decay = contaminant.retention_factor
    if t is None:
        return d / (1.0 - decay)
    if t < 0:
        raise ValidationError("t must be >= 0")
    return d * (1.0 - decay ** (t + 1)) / (1.0 - decay)


def kdem_series(
    dose: DoseSeries,
    contaminant: Contaminant,
    burn_in: int | None = None,
    s0: float | None = None,
) -> ExposureSeries:
    """Run the accumulation recursion for one member.

    By default S_0 is the mean of the member's positive weekly doses (0 when
    none), a deliberate whole-year look-ahead matching the model's
    initialization convention. Pass `s0` to start from another burden, e.g.
    for initialization-sensitivity studies.
    """
    if dose.n_weeks < 1:
        raise ValidationError("dose series must cover at least one week")
    if burn_in is None:
        burn_in = default_burn_in(contaminant)
    doses = dose.doses
    if s0 is None:
        positive = doses[doses > 0]
        s0 = float(positive.mean()) if positive.size else 0.0
    elif not np.isfinite(s0) or s0 < 0:
        raise ValidationError("s0 must be a finite nonnegative burden")
    else:
        s0 = float(s0)
    decay = contaminant.retention_factor
    series = np.empty(dose.n_weeks)
    current = s0
    for t in range(dose.n_weeks):
        current = decay * current + doses[t]
        series[t] = current
    at_risk, first = _risk_flag(series, contaminant, burn_in)
    return ExposureSeries(
        member=dose.member,
        doses=doses,
        series=series,
        s0=s0,
        burn_in=burn_in,
        at_risk=at_risk,
        first_exceed_week=first,
    )


def risk_indices(
    exposures,
    contaminant: Contaminant,
    burn_in: int | None = None,
    panel: PanelData | None = None,
    scenario: str = "baseline",
) -> RiskSummary:
    """Population indices over a set of exposure series.

    long_term_risk is the share of members whose burden beats the reference
    trajectory in some week past the burn-in; r_ptwi the share of
    member-weeks whose dose exceeds the tolerable weekly intake (strict).
    With a panel, the long-term index is also broken down by the household's
    income modality.
    """
    exposures = list(exposures)
    if burn_in is None:
        burn_in = default_burn_in(contaminant)
    n_members = len(exposures)
    if n_members == 0:
        return RiskSummary(
            scenario=scenario,
            long_term_risk=0.0,
            r_ptwi=0.0,
            long_term_defined=True,
            burn_in=burn_in,
            n_members=0,
            n_member_weeks=0,
        )
    n_weeks = exposures[0].n_weeks
    defined = n_weeks > burn_in
    if not defined:
        warnings.warn(
            f"panel has {n_weeks} weeks, burn-in is {burn_in}: long-term index undefined",
            stacklevel=2,
        )

    flags, firsts = {}, {}
    n_member_weeks = 0
    n_over = 0
    for exp in exposures:
        at_risk, first = _risk_flag(exp.series, contaminant, burn_in)
        flags[exp.member.member_id] = at_risk
        firsts[exp.member.member_id] = first
        n_member_weeks += exp.n_weeks
        n_over += int(np.sum(exp.doses > contaminant.ptwi))

    long_term = (sum(flags.values()) / n_members) if defined else float("nan")
    r_ptwi = n_over / n_member_weeks

    age_band_risk = {}
    if defined:
        for lo, hi in AGE_BANDS:
            in_band = [
                exp for exp in exposures if lo <= exp.member.age_years(n_weeks) < hi
            ]
            if in_band:
                share = sum(flags[e.member.member_id] for e in in_band) / len(in_band)
                age_band_risk[_band_label(lo, hi)] = (len(in_band), share)

    income_risk = {}
    if panel is not None and defined:
        income_q = panel.socio_meta.variables.index("income")
        by_household = {hh.household_id: hh for hh in panel.households}
        groups = {}
        for exp in exposures:
            hh = by_household.get(exp.member.household_id)
            if hh is None:
                continue
            code = int(hh.socio[0, income_q])
            groups.setdefault(code, []).append(flags[exp.member.member_id])
        income_risk = {
            code: (len(values), sum(values) / len(values))
            for code, values in sorted(groups.items())
        }

    return RiskSummary(
        scenario=scenario,
        long_term_risk=long_term,
        r_ptwi=r_ptwi,
        long_term_defined=defined,
        burn_in=burn_in,
        n_members=n_members,
        n_member_weeks=n_member_weeks,
        at_risk=flags,
        first_exceed_week=firsts,
        age_band_risk=age_band_risk,
        income_risk=income_risk,
    )


def apply_corrections(intakes: IntakeMatrix, outside_share: float = 0.0,
                      edible_fraction: float = 1.0) -> IntakeMatrix:
    """Scenario corrections on predicted intakes.

    Purchases miss consumption outside the home, so intakes inflate by
    1 / (1 - outside_share); only part of the purchased weight is edible, so
    they deflate by edible_fraction. Both optional and composable.
    """
    if not 0.0 <= outside_share < 1.0:
        raise ValidationError("outside_share must lie in [0, 1)")
    if not 0.0 < edible_fraction <= 1.0:
        raise ValidationError("edible_fraction must lie in (0, 1]")
    return intakes.scaled(edible_fraction / (1.0 - outside_share))


def percentile_curves(exposures, contaminant: Contaminant,
                      percentiles=(10, 50, 75, 90, 95, 99)) -> "pandas.DataFrame":
    """Weekly burden curves of the members at given percentiles of final-week
    burden, plus the maximum member and the reference trajectory."""
    import pandas as pd

    exposures = [e for e in exposures]
    if not exposures:
        raise ValidationError("no exposure series to plot")
    n_weeks = exposures[0].n_weeks
    final = np.array([e.series[-1] for e in exposures])
    order = np.argsort(final, kind="stable")
    data = {"week": np.arange(1, n_weeks + 1)}
    data["reference"] = np.array(
        [reference_exposure(contaminant, t) for t in range(1, n_weeks + 1)]
    )
    for pct in percentiles:
        idx = order[int(round(pct / 100.0 * (len(order) - 1)))]
        data[f"P{pct}"] = exposures[idx].series
    data["Pmax"] = exposures[order[-1]].series
    return pd.DataFrame(data)


def summary_to_dict(summary: RiskSummary) -> dict:
    """JSON-ready view of a risk summary (flags reduced to the flagged ids)."""
    flagged = sorted(mid for mid, flag in summary.at_risk.items() if flag)
    return {
        "scenario": summary.scenario,
        "long_term_risk": summary.long_term_risk,
        "long_term_defined": summary.long_term_defined,
        "r_ptwi": summary.r_ptwi,
        "burn_in": summary.burn_in,
        "n_members": summary.n_members,
        "n_member_weeks": summary.n_member_weeks,
        "n_at_risk": len(flagged),
        "at_risk_members": flagged,
        "first_exceed_week": {
            mid: summary.first_exceed_week[mid] for mid in flagged
        },
        "age_band_risk": {
            label: {"n": n, "risk": risk}
            for label, (n, risk) in sorted(summary.age_band_risk.items())
        },
        "income_risk": {
            str(code): {"n": n, "risk": risk}
            for code, (n, risk) in sorted(summary.income_risk.items())
        },
    }


def _risk_flag(series: np.ndarray, contaminant: Contaminant, burn_in: int):
    at_risk = False
    first = None
    for t in range(burn_in + 1, series.shape[0] + 1):
        if series[t - 1] > reference_exposure(contaminant, t):
            at_risk = True
            first = t
            break
    return at_risk, first


def _band_label(lo: float, hi: float) -> str:
    if hi >= 200.0:
        return f"{lo:g}+"
    return f"{lo:g}-{hi:g}"
