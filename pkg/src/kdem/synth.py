"""Synthetic panels with known ground truth, plus independent brute-force
oracles used by the test suite.

The generator draws individual weekly intakes

    y_iht = f_s(a_iht) + w_ht gamma + delta_t alpha + eps_iht

with household-exchangeable Gaussian errors Cov = sigma_eps^2 [(1-rho) I +
rho J], sums active members into household series, and keeps the individual
truths. The exchangeable errors are sampled through the exact eigen
factorization (mean direction + centered complement), which stays valid for
the negative rho the model produces.

The oracles recompute target quantities with none of the production
shortcuts: the restricted likelihood densely on the N x N covariance, and the
exposure risk flags by direct summation instead of the recursion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .design import DesignSet
from .errors import ValidationError
from .types import (
    SOCIO_VARIABLES,
    WEEKS_PER_YEAR,
    Household,
    IntakeMatrix,
    IntakeSeriesHousehold,
    Member,
    PanelData,
    SocioMeta,
)


@dataclass(frozen=True)
class PiecewiseLinear:
    """Age curve: intercept + slope * a + sum coef_k (a - knot_k)_+."""

    intercept: float
    slope: float
    knots: tuple = ()
    coefs: tuple = ()

    def __post_init__(self):
        if len(self.knots) != len(self.coefs):
            raise ValidationError("knots and coefs must pair up")

    def __call__(self, age):
        age = np.asarray(age, dtype=float)
        value = self.intercept + self.slope * age
        for knot, coef in zip(self.knots, self.coefs):
            value = value + coef * np.maximum(age - knot, 0.0)
        return value if value.ndim else float(value)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "slope": self.slope,
            "knots": list(self.knots),
            "coefs": list(self.coefs),
        }


@dataclass(frozen=True)
class TruthConfig:
    """Ground truth and population shape of a synthetic panel."""

    n_households: int = 200
    n_weeks: int = 53
    f_male: PiecewiseLinear = PiecewiseLinear(30.0, 2.0, (15.0, 40.0), (-1.5, -0.6))
    f_female: PiecewiseLinear = PiecewiseLinear(25.0, 1.6, (12.0,), (-1.2,))
    gamma: dict = field(default_factory=dict)  # (variable, modality) -> effect
    alpha: dict = field(default_factory=dict)  # week -> effect
    sigma_eps2: float = 100.0
    rho: float = -0.1
    size_probs: tuple = (0.25, 0.35, 0.2, 0.15, 0.05)  # household sizes 1..len
    socio_modalities: tuple = (3, 3, 3, 2)
    age_range: tuple = (0.2, 80.0)
    seed: int = 0

    def __post_init__(self):
        if self.sigma_eps2 < 0:
            raise ValidationError("sigma_eps2 must be >= 0 (0 = noiseless panel)")
        max_size = len(self.size_probs)
        if max_size >= 2 and self.rho <= -1.0 / (max_size - 1):
            raise ValidationError(
                f"rho = {self.rho} not positive-definite for household size {max_size}: "
                f"need rho > {-1.0 / (max_size - 1):.4f}"
            )
        if abs(sum(self.size_probs) - 1.0) > 1e-9:
            raise ValidationError("size_probs must sum to 1")
        if len(self.socio_modalities) != len(SOCIO_VARIABLES):
            raise ValidationError(f"need {len(SOCIO_VARIABLES)} socio modality counts")

    def curve(self, sex: str) -> PiecewiseLinear:
        return self.f_male if sex == "M" else self.f_female


@dataclass(frozen=True)
class TruthRecord:
    """What generate() actually used: parameters plus individual intakes."""

    config: TruthConfig
    individual: IntakeMatrix
    reference: dict  # socio variable -> reference modality (effect 0)

    def gamma_value(self, variable: str, code: int) -> float:
        return float(self.config.gamma.get((variable, code), 0.0))

    def alpha_value(self, week: int) -> float:
        return float(self.config.alpha.get(week, 0.0))


def exchangeable_errors(n: int, sigma2: float, rho: float, rng, size: int = 1) -> np.ndarray:
    """Draw `size` exchangeable Gaussian error vectors of length n with
    Var = sigma2, within-group correlation rho (exact factorization)."""
    if n >= 2 and rho <= -1.0 / (n - 1):
        raise ValidationError(f"rho = {rho} invalid for group size {n}")
    xi = rng.standard_normal((size, n))
    zeta = rng.standard_normal(size)
    centered = xi - xi.mean(axis=1, keepdims=True)
    lam_mean = sigma2 * (1.0 + (n - 1) * rho)
    lam_diff = sigma2 * (1.0 - rho)
    out = np.sqrt(lam_diff) * centered + (np.sqrt(lam_mean) * zeta / np.sqrt(n))[:, None]
    return out[0] if size == 1 else out


def truth_config_from_dict(payload: dict) -> TruthConfig:
    """TruthConfig from the JSON shape written next to simulated panels."""
    kwargs = {}
    for key in ("n_households", "n_weeks", "sigma_eps2", "rho", "seed"):
        if key in payload:
            kwargs[key] = payload[key]
    for key, name in (("f_male", "f_male"), ("f_female", "f_female")):
        if key in payload:
            entry = payload[key]
            kwargs[name] = PiecewiseLinear(
                intercept=float(entry["intercept"]),
                slope=float(entry["slope"]),
                knots=tuple(entry.get("knots", ())),
                coefs=tuple(entry.get("coefs", ())),
            )
    if "gamma" in payload:
        gamma = {}
        for key, value in payload["gamma"].items():
            var, code = key.rsplit(":", 1)
            gamma[(var, int(code))] = float(value)
        kwargs["gamma"] = gamma
    if "alpha" in payload:
        kwargs["alpha"] = {int(k): float(v) for k, v in payload["alpha"].items()}
    for key in ("size_probs", "socio_modalities", "age_range"):
        if key in payload:
            kwargs[key] = tuple(payload[key])
    return TruthConfig(**kwargs)


def generate(config: TruthConfig, rng=None) -> tuple:
    """Draw a synthetic panel; returns (PanelData, TruthRecord)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n_weeks = config.n_weeks
    sizes = rng.choice(
        np.arange(1, len(config.size_probs) + 1),
        size=config.n_households,
        p=np.asarray(config.size_probs),
    )
    reference = {
        var: m for var, m in zip(SOCIO_VARIABLES, config.socio_modalities)
    }

    households, all_members = [], []
    id_width = len(str(config.n_households))
    for h in range(config.n_households):
        hid = f"H{h + 1:0{id_width}d}"
        while True:
            ages0 = rng.uniform(*config.age_range, size=int(sizes[h]))
            if np.any(ages0 + (n_weeks - 1) / WEEKS_PER_YEAR >= 1.0):
                break
        members = []
        for i, age0 in enumerate(ages0):
            sex = "M" if rng.random() < 0.5 else "F"
            birth_week = 1 - int(round(age0 * WEEKS_PER_YEAR))
            members.append(
                Member(
                    member_id=f"{hid}m{i + 1}",
                    household_id=hid,
                    sex=sex,
                    birth_week=birth_week,
                )
            )
        codes = [rng.integers(1, m + 1) for m in config.socio_modalities]
        socio = np.tile(np.asarray(codes, dtype=np.int16), (n_weeks, 1))
        households.append(Household(household_id=hid, members=tuple(members), socio=socio))
        all_members.extend(members)

    member_row = {m.member_id: i for i, m in enumerate(all_members)}
    yhat = np.zeros((len(all_members), n_weeks))
    active = np.zeros((len(all_members), n_weeks), dtype=bool)
    intakes = {}
    for household in households:
        series = np.zeros(n_weeks)
        for week in range(1, n_weeks + 1):
            active_members = [m for m in household.members if m.is_active(week)]
            if not active_members:
                continue
            n = len(active_members)
            codes = household.socio[week - 1]
            base = sum(
                config.gamma.get((var, int(codes[q])), 0.0)
                for q, var in enumerate(SOCIO_VARIABLES)
            ) + config.alpha.get(week, 0.0)
            eps = exchangeable_errors(n, config.sigma_eps2, config.rho, rng)
            for j, member in enumerate(active_members):
                age = member.age_years(week)
                mean = float(config.curve(member.sex)(age)) + base
                value = mean + float(eps[j])
                row = member_row[member.member_id]
                yhat[row, week - 1] = value
                active[row, week - 1] = True
                series[week - 1] += value
        intakes[household.household_id] = IntakeSeriesHousehold(
            household_id=household.household_id, y=series
        )

    meta = SocioMeta(
        variables=SOCIO_VARIABLES,
        n_modalities=tuple(config.socio_modalities),
        labels={},
        reference=tuple(reference[var] for var in SOCIO_VARIABLES),
    )
    panel = PanelData(
        n_weeks=n_weeks,
        households=tuple(households),
        intakes=intakes,
        socio_meta=meta,
    )
    truth = TruthRecord(
        config=config,
        individual=IntakeMatrix(members=tuple(all_members), yhat=yhat, active=active),
        reference=reference,
    )
    return panel, truth


def simulate_responses(design: DesignSet, theta, sigma_u2, sigma_eps2: float, rho: float, rng):
    """Redraw the rescaled responses of an existing design: y = C theta + Z u
    + eps with u ~ N(0, G) and row errors of variance
    sigma_eps2 (1 + (n_row - 1) rho). Returns (y, u).

    This is the fast path for Monte Carlo loops: demographics (and hence C,
    Z) stay fixed while u and the noise are redrawn each replicate.
    """
    theta = np.asarray(theta, dtype=float)
    u = np.zeros(design.n_random)
    for (label, start, stop), var in zip(design.penalty_blocks, np.atleast_1d(sigma_u2)):
        u[start:stop] = rng.standard_normal(stop - start) * np.sqrt(var)
    row_var = sigma_eps2 * (1.0 + (design.sizes - 1) * rho)
    if np.any(row_var <= 0):
        raise ValidationError("rho incompatible with observed household sizes")
    eps = rng.standard_normal(design.n_rows) * np.sqrt(row_var)
    y = design.C @ theta + design.Z @ u + eps
    return y, u


def with_response(design: DesignSet, y: np.ndarray) -> DesignSet:
    """Copy of a design with a new response vector."""
    from dataclasses import replace

    y = np.asarray(y, dtype=float)
    if y.shape != design.y.shape:
        raise ValidationError("response length must match the design")
    return replace(design, y=y)


def oracle_restricted_loglik(design: DesignSet, sigma_n2, sigma_u2, method: str = "REML") -> float:
    """Textbook dense evaluation of the (restricted) log-likelihood.

    Builds the full N x N covariance and uses generic determinant/solve
    routines; shares no code with the production evaluator.
    """
    sigma_n2 = np.asarray(sigma_n2, dtype=float)
    sigma_u2 = np.atleast_1d(np.asarray(sigma_u2, dtype=float))
    N, p = design.n_rows, design.n_fixed
    row_var = sigma_n2[design.group_index]
    g_diag = np.zeros(design.n_random)
    for (label, start, stop), var in zip(design.penalty_blocks, sigma_u2):
        g_diag[start:stop] = var
    V = np.diag(row_var) + design.Z @ np.diag(g_diag) @ design.Z.T
    sign, logdet_V = np.linalg.slogdet(V)
    if sign <= 0:
        return -np.inf
    V_inv = np.linalg.inv(V)
    C = design.C
    M = C.T @ V_inv @ C
    theta = np.linalg.solve(M, C.T @ V_inv @ design.y)
    r = design.y - C @ theta
    quad = float(r @ V_inv @ r)
    if method == "REML":
        sign_m, logdet_M = np.linalg.slogdet(M)
        if sign_m <= 0:
            return -np.inf
        return -0.5 * ((N - p) * np.log(2 * np.pi) + logdet_V + logdet_M + quad)
    return -0.5 * (N * np.log(2 * np.pi) + logdet_V + quad)


def oracle_exposure(doses: np.ndarray, s0: float, dissipation: float) -> np.ndarray:
    """Body burden by direct summation: S_t = S_0 e^(-eta t) +
    sum_{s<=t} D_s e^(-eta (t-s))."""
    doses = np.asarray(doses, dtype=float)
    n = doses.shape[0]
    out = np.empty(n)
    for t in range(1, n + 1):
        decay = np.exp(-dissipation * (t - np.arange(1, t + 1)))
        out[t - 1] = s0 * np.exp(-dissipation * t) + float(doses[:t] @ decay)
    return out


def oracle_risk(dose_list, contaminant, burn_in: int | None = None):
    """Risk summary recomputed by direct summation and a plain scan.

    `dose_list` pairs member ids with dose vectors; returns the same fields
    as the production summary for flag-by-flag comparison.
    """
    from .exposure import reference_exposure

    if burn_in is None:
        burn_in = int(np.ceil(6 * contaminant.half_life_weeks))
    eta = contaminant.dissipation_rate
    flagged, first_weeks = {}, {}
    n_member_weeks = 0
    n_over_ptwi = 0
    for member_id, doses in dose_list:
        doses = np.asarray(doses, dtype=float)
        positive = doses[doses > 0]
        s0 = float(positive.mean()) if positive.size else 0.0
        series = oracle_exposure(doses, s0, eta)
        at_risk = False
        first = None
        for t in range(1, doses.shape[0] + 1):
            if t > burn_in and series[t - 1] > reference_exposure(contaminant, t):
                at_risk = True
                if first is None:
                    first = t
        flagged[member_id] = at_risk
        first_weeks[member_id] = first
        n_member_weeks += doses.shape[0]
        n_over_ptwi += int(np.sum(doses > contaminant.ptwi))
    n_members = len(flagged)
    return {
        "at_risk": flagged,
        "first_exceed_week": first_weeks,
        "long_term_risk": (sum(flagged.values()) / n_members) if n_members else 0.0,
        "r_ptwi": (n_over_ptwi / n_member_weeks) if n_member_weeks else 0.0,
    }


DEFAULT_CONTAMINATION_ROWS = (
    ("Fish", 0.147, 0.003, 2.45, 0.235, 2832),
    ("Mollusks and crustaceans", 0.014, 0.001, 0.18, 0.02, 817),
)

DEFAULT_BODYWEIGHT_ROWS = (
    ("M", 1.0, 4.0, 14.0),
    ("M", 4.0, 11.0, 26.0),
    ("M", 11.0, 18.0, 52.0),
    ("M", 18.0, 65.0, 75.0),
    ("M", 65.0, 110.0, 72.0),
    ("F", 1.0, 4.0, 13.0),
    ("F", 4.0, 11.0, 25.0),
    ("F", 11.0, 18.0, 50.0),
    ("F", 18.0, 65.0, 62.0),
    ("F", 65.0, 110.0, 60.0),
)


def write_panel(panel: PanelData, out_dir, truth: TruthRecord | None = None) -> int:
    """Write a panel as the input files `load_panel` reads, plus truth.json.

    Household intakes are expressed as purchases of the first default food
    group; negative synthetic intakes (possible under the Gaussian model)
    are written as zero purchases. Returns the number of clamped weeks.
    """
    from .ingest import (
        BODYWEIGHT_FILE,
        CONTAMINATION_FILE,
        HOUSEHOLDS_FILE,
        MEMBERS_FILE,
        PURCHASES_FILE,
        SOCIO_LABELS_FILE,
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    group, level = DEFAULT_CONTAMINATION_ROWS[0][0], DEFAULT_CONTAMINATION_ROWS[0][1]
    ug_per_kg = level * 1000.0  # written table is in mg/kg

    clamped = 0
    with open(out / HOUSEHOLDS_FILE, "w", encoding="utf-8") as fh:
        fh.write("household_id,week," + ",".join(SOCIO_VARIABLES) + "\n")
        for hh in panel.households:
            for week in range(1, panel.n_weeks + 1):
                codes = ",".join(str(int(c)) for c in hh.socio[week - 1])
                fh.write(f"{hh.household_id},{week},{codes}\n")
    with open(out / MEMBERS_FILE, "w", encoding="utf-8") as fh:
        fh.write("household_id,member_id,sex,birth_week\n")
        for hh in panel.households:
            for m in hh.members:
                fh.write(f"{hh.household_id},{m.member_id},{m.sex},{m.birth_week}\n")
    with open(out / PURCHASES_FILE, "w", encoding="utf-8") as fh:
        fh.write("household_id,week,food_group,quantity_kg\n")
        for hh in panel.households:
            y = panel.intakes[hh.household_id].y
            for week in range(1, panel.n_weeks + 1):
                value = float(y[week - 1])
                if value < 0:
                    clamped += 1
                    continue
                if value == 0:
                    continue
                quantity = value / ug_per_kg
                fh.write(f"{hh.household_id},{week},{group},{format(quantity, '.17g')}\n")
    with open(out / CONTAMINATION_FILE, "w", encoding="utf-8") as fh:
        fh.write("food_group,mean,min,max,sd,n_analyses\n")
        for row in DEFAULT_CONTAMINATION_ROWS:
            fh.write(",".join(str(v) for v in row) + "\n")
    with open(out / BODYWEIGHT_FILE, "w", encoding="utf-8") as fh:
        fh.write("sex,age_min_years,age_max_years,median_kg\n")
        for row in DEFAULT_BODYWEIGHT_ROWS:
            fh.write(",".join(str(v) for v in row) + "\n")
    meta = panel.socio_meta
    sidecar = {
        var: {"labels": meta.labels.get(var, []), "reference": meta.reference[q]}
        for q, var in enumerate(meta.variables)
    }
    with open(out / SOCIO_LABELS_FILE, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if truth is not None:
        payload = {
            "f_male": truth.config.f_male.to_dict(),
            "f_female": truth.config.f_female.to_dict(),
            "gamma": {f"{var}:{code}": val for (var, code), val in sorted(truth.config.gamma.items())},
            "alpha": {str(w): v for w, v in sorted(truth.config.alpha.items())},
            "sigma_eps2": truth.config.sigma_eps2,
            "rho": truth.config.rho,
            "seed": truth.config.seed,
            "n_households": truth.config.n_households,
            "n_weeks": truth.config.n_weeks,
            "clamped_weeks": clamped,
        }
        with open(out / "truth.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return clamped
