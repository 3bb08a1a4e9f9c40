"""Hypothesis tests on the fitted household model.

Three families: Wald F-tests on linear combinations of the fixed effects,
likelihood-ratio tests between nested fits, and the boundary-corrected LRT
for a variance component (whose null distribution is the half-half mixture
of a point mass at 0 and a chi-square with 1 degree of freedom). A small
text grammar addresses coefficients: `g4` is the 4th socio dummy, `a12` the
week-12 effect, `b2` the 2nd gender/age column; constraints look like
"g4=0" or "g4=g7", several joined with ";".
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .design import DesignSet, assemble
from .errors import ValidationError
from .reml import FitResult, VarianceDecomposition, fit_reml
from .types import Household, ModelSpec, PanelData

ALPHA_DEFAULT = 0.05

# Negative likelihood-ratio statistics beyond this slack indicate broken
# nesting or non-convergence rather than rounding.
_LRT_SLACK = -1e-6


@dataclass(frozen=True)
class LinearHypothesis:
    """Linear constraints `matrix @ theta = 0` on the fixed effects."""

    matrix: np.ndarray  # (n_constraints, p)
    label: str = ""

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", mat)
        if mat.shape[0] == 0:
            raise ValidationError("hypothesis needs at least one constraint")
        if np.linalg.matrix_rank(mat) < mat.shape[0]:
            raise ValidationError(f"constraint matrix of {self.label!r} is rank deficient")

    @property
    def rank(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class TestReport:
    """Outcome of one hypothesis test at the 5% level."""

    label: str
    method: str  # "F", "LRT", "boundary-LRT", "Wald"
    statistic: float
    df: tuple  # (df1, df2) for F, (df,) otherwise
    p_value: float
    reject: bool

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValidationError(f"p-value {self.p_value} outside [0, 1]")

    def row(self) -> dict:
        return {
            "label": self.label,
            "method": self.method,
            "statistic": self.statistic,
            "df": "/".join(str(d) for d in self.df),
            "p_value": self.p_value,
            "reject_5pct": self.reject,
        }


def f_test(fit: FitResult, hyp: LinearHypothesis, alpha: float = ALPHA_DEFAULT) -> TestReport:
    """Wald F-test of `hyp.matrix @ theta = 0`.

    Statistic (C theta)' [C Cov C']^-1 (C theta) / rank, with denominator
    degrees of freedom N - p (the simple residual rule; approximate).
    """
    C = hyp.matrix
    if C.shape[1] != fit.theta.shape[0]:
        raise ValidationError(
            f"hypothesis has {C.shape[1]} columns, model has {fit.theta.shape[0]} fixed effects"
        )
    estimate = C @ fit.theta
    cov = C @ fit.cov_fixed @ C.T
    try:
        solved = np.linalg.solve(cov, estimate)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"constraint covariance of {hyp.label!r} is singular") from exc
    df1 = hyp.rank
    df2 = fit.design.n_rows - fit.design.n_fixed
    statistic = float(estimate @ solved) / df1
    statistic = max(statistic, 0.0)
    p_value = float(stats.f.sf(statistic, df1, df2))
    return TestReport(
        label=hyp.label,
        method="F",
        statistic=statistic,
        df=(df1, df2),
        p_value=p_value,
        reject=p_value < alpha,
    )


def lrt(fit_full: FitResult, fit_reduced: FitResult, df: int, alpha: float = ALPHA_DEFAULT,
        label: str = "") -> TestReport:
    """Likelihood-ratio test of nested fits: 2 (l_full - l_reduced) ~ chi2_df.

    Restricted likelihoods are only comparable when both fits share the
    fixed-effect structure; tests that change fixed effects must be run with
    method="ML" fits.
    """
    _check_same_data(fit_full, fit_reduced)
    if fit_full.method != fit_reduced.method:
        raise ValidationError("both fits must use the same likelihood (REML or ML)")
    if fit_full.method == "REML" and (
        fit_full.design.fixed_names != fit_reduced.design.fixed_names
    ):
        raise ValidationError(
            "restricted likelihoods are not comparable across different fixed-effect "
            "structures; refit both models with method='ML'"
        )
    if df < 1:
        raise ValidationError("df must be >= 1")
    statistic = 2.0 * (fit_full.loglik - fit_reduced.loglik)
    if statistic < _LRT_SLACK * max(1.0, abs(fit_full.loglik)):
        raise ValidationError(
            f"likelihood ratio is negative ({statistic:.3g}); the models are not "
            "nested or one fit did not converge"
        )
    statistic = max(statistic, 0.0)
    p_value = float(stats.chi2.sf(statistic, df))
    return TestReport(
        label=label,
        method="LRT",
        statistic=statistic,
        df=(df,),
        p_value=p_value,
        reject=p_value < alpha,
    )


def lrt_boundary(fit_full: FitResult, fit_reduced: FitResult, alpha: float = ALPHA_DEFAULT,
                 label: str = "") -> TestReport:
    """LRT for one variance component against its boundary value 0.

    The null distribution is the equal mixture of a point mass at 0 and
    chi2_1, so p = 1 when the statistic is 0 and 0.5 P(chi2_1 > stat)
    otherwise.
    """
    _check_same_data(fit_full, fit_reduced)
    if fit_full.method != fit_reduced.method:
        raise ValidationError("both fits must use the same likelihood (REML or ML)")
    if fit_full.design.fixed_names != fit_reduced.design.fixed_names:
        raise ValidationError("boundary test requires identical fixed-effect structures")
    # The reduced model must lack exactly one variance component, either
    # structurally (the component is absent) or by constraint (pinned at 0).
    # A full fit whose estimate lands on the boundary is still a valid
    # maximizer: it yields a zero statistic, not an error.
    if len(fit_full.sigma_u2) - len(fit_reduced.sigma_u2) != 1:
        n_full = sum(v != 0 for v in fit_full.sigma_u2)
        n_red = sum(v != 0 for v in fit_reduced.sigma_u2)
        if len(fit_full.sigma_u2) != len(fit_reduced.sigma_u2) or n_full - n_red != 1:
            raise ValidationError(
                "the reduced fit must set exactly one variance component to 0 "
                f"(full has {n_full} active, reduced has {n_red})"
            )
    statistic = 2.0 * (fit_full.loglik - fit_reduced.loglik)
    if statistic < _LRT_SLACK * max(1.0, abs(fit_full.loglik)):
        raise ValidationError(
            f"likelihood ratio is negative ({statistic:.3g}); the models are not "
            "nested or one fit did not converge"
        )
    statistic = max(statistic, 0.0)
    p_value = 1.0 if statistic == 0.0 else float(0.5 * stats.chi2.sf(statistic, 1))
    return TestReport(
        label=label,
        method="boundary-LRT",
        statistic=statistic,
        df=(1,),
        p_value=p_value,
        reject=p_value < alpha,
    )


def test_rho_zero(decomp: VarianceDecomposition, alpha: float = ALPHA_DEFAULT) -> TestReport:
    """Wald test of zero within-household correlation.

    rho is estimated by the variance regression, outside the likelihood, so
    the test uses its delta-method standard error.
    """
    if decomp.se_rho <= 0:
        raise ValidationError("rho has no positive standard error; test undefined")
    statistic = decomp.rho / decomp.se_rho
    p_value = float(2.0 * stats.norm.sf(abs(statistic)))
    return TestReport(
        label="rho=0",
        method="Wald",
        statistic=float(statistic),
        df=(1,),
        p_value=p_value,
        reject=p_value < alpha,
    )


_TOKEN = re.compile(r"^(g|a|b)(\d+)$")


def coefficient_index(design: DesignSet, token: str) -> int:
    """Column index of a grammar token: g<k> socio, a<k> week, b<k> gender."""
    match = _TOKEN.match(token.strip())
    if not match:
        raise ValidationError(f"cannot parse coefficient token {token!r}")
    kind, k = match.group(1), int(match.group(2))
    if kind == "g":
        socio = [j for j, name in enumerate(design.fixed_names)
                 if "=" in name and not name.startswith("week=")]
        pool, what = socio, "socio dummy"
    elif kind == "a":
        if k not in design.week_columns:
            raise ValidationError(f"no week-effect column for week {k}")
        return design.week_columns[k]
    else:
        gender = [j for j, name in enumerate(design.fixed_names)
                  if "=" not in name]
        pool, what = gender, "gender/age column"
    if not 1 <= k <= len(pool):
        raise ValidationError(f"{what} index {k} outside 1..{len(pool)}")
    return pool[k - 1]


def parse_hypothesis(text: str, design: DesignSet, label: str = "") -> LinearHypothesis:
    """Parse constraints like "g8=0" or "g4=g7"; several joined with ";"."""
    rows = []
    p = design.n_fixed
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        pieces = part.split("=")
        if len(pieces) != 2:
            raise ValidationError(f"constraint {part!r} must have exactly one '='")
        left, right = pieces[0].strip(), pieces[1].strip()
        row = np.zeros(p)
        row[coefficient_index(design, left)] = 1.0
        if right != "0":
            row[coefficient_index(design, right)] -= 1.0
        if not np.any(row):
            raise ValidationError(f"constraint {part!r} is empty (same coefficient twice)")
        rows.append(row)
    if not rows:
        raise ValidationError(f"hypothesis {text!r} has no constraints")
    return LinearHypothesis(matrix=np.vstack(rows), label=label or text)


@dataclass(frozen=True)
class MergeStep:
    """One step of the modality-merging procedure."""

    variable: str
    modality: int
    p_value: float
    merged_into: int


@dataclass(frozen=True)
class MergeResult:
    fit: FitResult
    trail: tuple  # of MergeStep
    panel: PanelData
    reports: tuple  # final per-modality TestReports


def merge_modality(panel: PanelData, variable: str, code: int, into: int) -> PanelData:
    """Panel with one socio modality recoded into another."""
    if variable not in panel.socio_meta.variables:
        raise ValidationError(f"unknown socio variable {variable!r}")
    q = panel.socio_meta.variables.index(variable)
    households = []
    for hh in panel.households:
        socio = hh.socio.copy()
        socio[socio[:, q] == code, q] = into
        households.append(Household(household_id=hh.household_id, members=hh.members, socio=socio))
    return PanelData(
        n_weeks=panel.n_weeks,
        households=tuple(households),
        intakes=panel.intakes,
        socio_meta=panel.socio_meta,
    )


def hierarchical_merge(panel: PanelData, spec: ModelSpec, alpha: float = ALPHA_DEFAULT,
                       method: str = "REML") -> MergeResult:
    """Backward modality selection: repeatedly merge the least significant
    socio modality (largest p-value above `alpha`) into its variable's
    reference and refit, until every remaining modality tests significant.

    Returns the final fit, the merge trail, the recoded panel and the final
    per-modality test reports.
    """
    trail = []
    current = panel
    while True:
        design = assemble(current, spec)
        fit = fit_reml(design, spec, method=method)
        reports = []
        for (variable, code), j in sorted(design.socio_columns.items()):
            row = np.zeros(design.n_fixed)
            row[j] = 1.0
            hyp = LinearHypothesis(matrix=row[None, :], label=f"{variable}={code}")
            reports.append(((variable, code), f_test(fit, hyp, alpha=alpha)))
        candidates = [(key, rep) for key, rep in reports if rep.p_value > alpha]
        if not candidates:
            return MergeResult(
                fit=fit,
                trail=tuple(trail),
                panel=current,
                reports=tuple(rep for _, rep in reports),
            )
        (variable, code), worst = max(candidates, key=lambda item: item[1].p_value)
        into = design.reference[variable]
        trail.append(
            MergeStep(variable=variable, modality=code, p_value=worst.p_value, merged_into=into)
        )
        current = merge_modality(current, variable, code, into)


def _check_same_data(fit_a: FitResult, fit_b: FitResult):
    if fit_a.design.n_rows != fit_b.design.n_rows or not np.array_equal(
        fit_a.design.y, fit_b.design.y
    ):
        raise ValidationError("fits compare different data; tests require the same rows")
