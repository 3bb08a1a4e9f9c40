"""Core domain types: contaminant, household roster, panel container, model options.

Everything here is immutable after construction and safe to share across
workers. Numpy arrays held by these objects are treated as read-only by
convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Fractional-year age uses a fixed weeks-per-year constant so that mid-year
# birthdays land inside the panel (a 53-week year makes integer years ambiguous).
WEEKS_PER_YEAR = 52.18

# Consumption starts at one year of age; younger members do not enter the model.
ACTIVE_AGE_YEARS = 1.0

# Hard cap on household size accepted at ingestion.
MAX_HOUSEHOLD_SIZE = 12

SOCIO_VARIABLES = ("income", "region", "occupation", "education")


@dataclass(frozen=True)
class Contaminant:
    """A contaminant with first-order elimination kinetics.

    Attributes:
        name: label used in reports.
        half_life_weeks: weeks for the body burden to halve absent intake.
        ptwi: tolerable weekly intake, ug per kg body weight per week.
    """

    name: str
    half_life_weeks: float
    ptwi: float

    def __post_init__(self):
        if not self.half_life_weeks > 0:
            raise ValidationError(f"half_life_weeks must be > 0, got {self.half_life_weeks}")
        if not self.ptwi > 0:
            raise ValidationError(f"ptwi must be > 0, got {self.ptwi}")

    @property
    def dissipation_rate(self) -> float:
        """Weekly dissipation rate: ln(2) / half-life. Always > 0."""
        return math.log(2.0) / self.half_life_weeks

    @property
    def retention_factor(self) -> float:
        """Week-over-week retained fraction exp(-rate), strictly < 1."""
        return math.exp(-self.dissipation_rate)


#: Default contaminant used by the CLI: methylmercury, 6-week half-life,
#: PTWI 1.6 ug/kg bw/week.
METHYLMERCURY = Contaminant("methylmercury", half_life_weeks=6.0, ptwi=1.6)


@dataclass(frozen=True)
class Member:
    """One household member.

    `birth_week` is a panel-week index and may be negative or far in the past;
    ages are fractional years relative to it. Body weight is not stored: it is
    resolved from a body-weight table at dose time.
    """

    member_id: str
    household_id: str
    sex: str  # "M" or "F"
    birth_week: int

    def __post_init__(self):
        if self.sex not in ("M", "F"):
            raise ValidationError(
                f"member {self.member_id!r}: sex must be 'M' or 'F', got {self.sex!r}"
            )

    def age_years(self, week: int) -> float:
        """Fractional age in years at the given week, clamped at 0 before birth."""
        return max((week - self.birth_week) / WEEKS_PER_YEAR, 0.0)

    def is_active(self, week: int) -> bool:
        """Active (modelled) members are at least one year old."""
        return self.age_years(week) >= ACTIVE_AGE_YEARS


@dataclass(frozen=True)
class Household:
    """A household: members plus per-week socioeconomic codes.

    Attributes:
        socio: integer array of shape (T, Q); socio[t-1, q] is the modality
            code of socio variable q in week t, in 1..m_q.
    """

    household_id: str
    members: tuple[Member, ...]
    socio: np.ndarray

    def active_size(self, week: int) -> int:
        """Number of members at least one year old in the given week."""
        return sum(1 for m in self.members if m.is_active(week))


@dataclass(frozen=True)
class IntakeSeriesHousehold:
    """Weekly contaminant intake of one household, ug/week, weeks 1..T."""

    household_id: str
    y: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.y)):
            raise ValidationError(f"household {self.household_id!r}: non-finite intake value")


@dataclass(frozen=True)
class SocioMeta:
    """Modality structure of the socioeconomic variables.

    Attributes:
        n_modalities: number of modalities m_q per variable, codes are 1..m_q.
        labels: optional modality labels per variable (index 0 <-> code 1).
        reference: reference modality code per variable (defaults to m_q).
    """

    variables: tuple[str, ...] = SOCIO_VARIABLES
    n_modalities: tuple[int, ...] = ()
    labels: dict = field(default_factory=dict)
    reference: tuple[int, ...] = ()

    def label(self, var: str, code: int) -> str:
        names = self.labels.get(var)
        if names and 1 <= code <= len(names):
            return names[code - 1]
        return f"{var}:{code}"


@dataclass(frozen=True)
class PanelData:
    """A validated single-year panel: roster, socio codes and intake series.

    Weeks are indexed 1..n_weeks. All series arrays have length n_weeks.
    """

    n_weeks: int
    households: tuple[Household, ...]
    intakes: dict  # household_id -> IntakeSeriesHousehold
    socio_meta: SocioMeta

    @property
    def n_households(self) -> int:
        return len(self.households)

    def members(self):
        for hh in self.households:
            yield from hh.members

    @property
    def n_members(self) -> int:
        return sum(len(hh.members) for hh in self.households)

    def age_at(self, member: Member, week: int) -> float:
        """Fractional age of `member` at `week`, validating the week index."""
        return age_at(member, week, n_weeks=self.n_weeks)

    def active_counts(self) -> np.ndarray:
        """Array (H, T) of active household sizes n_{h,t}."""
        out = np.zeros((len(self.households), self.n_weeks), dtype=int)
        for i, hh in enumerate(self.households):
            for t in range(1, self.n_weeks + 1):
                out[i, t - 1] = hh.active_size(t)
        return out


def age_at(member: Member, week: int, n_weeks: int | None = None) -> float:
    """Fractional age in years of a member at a panel week.

    Ages are evaluated at the week index itself (the Monday of the week) and
    clamped at 0 before birth. When `n_weeks` is given the week must lie in
    1..n_weeks.
    """
    if n_weeks is not None and not 1 <= week <= n_weeks:
        raise ValidationError(f"week {week} outside panel range 1..{n_weeks}")
    return member.age_years(week)


@dataclass(frozen=True)
class IntakeMatrix:
    """Predicted individual weekly intakes (ug/week).

    `yhat` holds the raw linear-model predictions, which may be negative;
    `clamped()` is the nonnegative copy used for exposure. `active` marks
    member-weeks that enter the model (age >= 1).
    """

    members: tuple  # of Member
    yhat: np.ndarray  # (n_members, n_weeks)
    active: np.ndarray  # (n_members, n_weeks) bool

    def __post_init__(self):
        if self.yhat.shape != self.active.shape:
            raise ValidationError("yhat and active shapes differ")
        if len(self.members) != self.yhat.shape[0]:
            raise ValidationError("one row per member required")
        if not np.all(np.isfinite(self.yhat[self.active])):
            raise ValidationError("predicted intakes must be finite on active weeks")

    @property
    def n_weeks(self) -> int:
        return self.yhat.shape[1]

    def clamped(self) -> np.ndarray:
        """Predictions with negatives clamped to 0 (exposure-stage input)."""
        return np.maximum(self.yhat, 0.0)

    def row(self, member_id: str) -> int:
        for i, member in enumerate(self.members):
            if member.member_id == member_id:
                return i
        raise KeyError(member_id)

    def scaled(self, factor: float) -> "IntakeMatrix":
        return IntakeMatrix(
            members=self.members, yhat=self.yhat * factor, active=self.active
        )


@dataclass(frozen=True)
class ModelSpec:
    """Options of the decomposition model.

    Attributes:
        gender_split: separate age curves per sex (True) or one pooled curve.
        shared_penalty: one smoothing variance shared by both sexes (True) or
            one per sex. Ignored when gender_split is False.
        max_group_size: residual-variance group cap; households of size
            >= max_group_size share one variance group.
        reference_week: week contributing no seasonal dummy column.
        socio_reference: optional mapping variable name -> reference modality
            code; by default the last modality of each variable is the reference.
        max_knots: cap on the number of spline knots per curve.
        min_group_rows: variance groups with fewer rows are pooled with the
            adjacent smaller-size group.
    """

    gender_split: bool = True
    shared_penalty: bool = True
    max_group_size: int = 6
    reference_week: int = 1
    socio_reference: dict | None = None
    max_knots: int = 35
    min_group_rows: int = 10

    def __post_init__(self):
        if self.max_group_size < 1:
            raise ValidationError("max_group_size must be >= 1")
        if self.reference_week < 1:
            raise ValidationError("reference_week must be >= 1")
        if self.max_knots < 0:
            raise ValidationError("max_knots must be >= 0")
