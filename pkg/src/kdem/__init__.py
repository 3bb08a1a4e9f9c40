"""Household intake decomposition and kinetic dietary exposure modelling.

The package splits household food-purchase series into individual weekly
contaminant intakes with a penalized-spline linear mixed model (REML), then
accumulates those intakes into body burden and long-term risk indices with a
one-compartment kinetic model.
"""

from .design import DesignSet, assemble, build_bases, household_row, individual_row
from .errors import ConvergenceError, DecompositionError, KdemError, ValidationError
from .estimator import IntakeDecomposer
from .exposure import (
    DoseSeries,
    ExposureSeries,
    RiskSummary,
    apply_corrections,
    default_burn_in,
    kdem_series,
    percentile_curves,
    reference_exposure,
    relative_dose,
    risk_indices,
)
from .inference import (
    LinearHypothesis,
    MergeResult,
    TestReport,
    f_test,
    hierarchical_merge,
    lrt,
    lrt_boundary,
    parse_hypothesis,
    test_rho_zero,
)
from .ingest import (
    BodyWeightTable,
    ContaminationTable,
    PurchaseRecord,
    ValidationReport,
    household_intake,
    load_bodyweight,
    load_contamination,
    load_panel,
    validate_directory,
)
from .reml import (
    FitResult,
    VarianceDecomposition,
    decompose_variance,
    evaluate_params,
    fit_reml,
    predict_individual,
)
from .splines import SplineBasis, eval_truncated, select_knots
from .types import (
    ACTIVE_AGE_YEARS,
    MAX_HOUSEHOLD_SIZE,
    METHYLMERCURY,
    SOCIO_VARIABLES,
    WEEKS_PER_YEAR,
    Contaminant,
    Household,
    IntakeMatrix,
    IntakeSeriesHousehold,
    Member,
    ModelSpec,
    PanelData,
    SocioMeta,
    age_at,
)

__version__ = "0.1.0"

__all__ = [
    "ACTIVE_AGE_YEARS",
    "BodyWeightTable",
    "Contaminant",
    "ContaminationTable",
    "ConvergenceError",
    "DecompositionError",
    "DesignSet",
    "DoseSeries",
    "ExposureSeries",
    "FitResult",
    "Household",
    "IntakeDecomposer",
    "IntakeMatrix",
    "IntakeSeriesHousehold",
    "KdemError",
    "LinearHypothesis",
    "MAX_HOUSEHOLD_SIZE",
    "METHYLMERCURY",
    "Member",
    "MergeResult",
    "ModelSpec",
    "PanelData",
    "PurchaseRecord",
    "RiskSummary",
    "SOCIO_VARIABLES",
    "SocioMeta",
    "SplineBasis",
    "TestReport",
    "ValidationError",
    "ValidationReport",
    "VarianceDecomposition",
    "WEEKS_PER_YEAR",
    "age_at",
    "apply_corrections",
    "assemble",
    "build_bases",
    "decompose_variance",
    "default_burn_in",
    "eval_truncated",
    "evaluate_params",
    "f_test",
    "fit_reml",
    "hierarchical_merge",
    "household_intake",
    "household_row",
    "individual_row",
    "kdem_series",
    "load_bodyweight",
    "load_contamination",
    "load_panel",
    "lrt",
    "lrt_boundary",
    "parse_hypothesis",
    "percentile_curves",
    "predict_individual",
    "reference_exposure",
    "relative_dose",
    "risk_indices",
    "select_knots",
    "test_rho_zero",
    "validate_directory",
    "__version__",
]
