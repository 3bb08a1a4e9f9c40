"""Estimator-style front end over design assembly, fitting and prediction.

IntakeDecomposer follows the fit/predict convention: construct with model
options, `fit(panel)`, then `predict()` for individual intakes. Parameters
are introspectable via get_params/set_params, so the estimator clones and
grid-searches like any other.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .design import assemble, build_bases
from .errors import ValidationError
from .reml import decompose_variance, fit_reml, predict_individual
from .types import IntakeMatrix, ModelSpec, PanelData


class IntakeDecomposer(BaseEstimator):
    """Disaggregates household intake series into member-level intakes.

    Parameters mirror the model options: per-gender age curves with penalized
    truncated-line splines, socio and week effects, household-size-grouped
    residual variances estimated by restricted maximum likelihood.

    Attributes after fit: `result_` (estimates, BLUP, covariance), `design_`
    (stacked model rows and column metadata), `bases_` (per-gender knots),
    `panel_` (the training panel).
    """

    def __init__(
        self,
        gender_split: bool = True,
        shared_penalty: bool = True,
        max_group_size: int = 6,
        reference_week: int = 1,
        socio_reference: dict | None = None,
        max_knots: int = 35,
        min_group_rows: int = 10,
        method: str = "REML",
    ):
        self.gender_split = gender_split
        self.shared_penalty = shared_penalty
        self.max_group_size = max_group_size
        self.reference_week = reference_week
        self.socio_reference = socio_reference
        self.max_knots = max_knots
        self.min_group_rows = min_group_rows
        self.method = method

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            gender_split=self.gender_split,
            shared_penalty=self.shared_penalty,
            max_group_size=self.max_group_size,
            reference_week=self.reference_week,
            socio_reference=self.socio_reference,
            max_knots=self.max_knots,
            min_group_rows=self.min_group_rows,
        )

    def fit(self, panel: PanelData, y=None) -> "IntakeDecomposer":
        """Assemble the design from the panel and estimate the model."""
        if not isinstance(panel, PanelData):
            raise ValidationError("fit expects a PanelData instance")
        del y  # the response lives inside the panel
        spec = self.model_spec()
        self.bases_ = build_bases(panel, spec)
        self.design_ = assemble(panel, spec, bases=self.bases_)
        self.result_ = fit_reml(self.design_, spec, method=self.method)
        self.panel_ = panel
        return self

    def predict(self, panel: PanelData | None = None) -> IntakeMatrix:
        """Predicted weekly intake for every member of the panel."""
        self._check_fitted()
        return predict_individual(self.result_, panel or self.panel_, bases=self.bases_)

    def transform(self, panel: PanelData | None = None) -> IntakeMatrix:
        """Alias of predict, for pipeline-style use."""
        return self.predict(panel)

    def score(self, panel: PanelData | None = None, y=None) -> float:
        """Log-likelihood of the fitted model (higher is better)."""
        self._check_fitted()
        del panel, y
        return float(self.result_.loglik)

    def decompose(self, strict: bool = False):
        """Split the fitted group variances into individual-level variance
        and within-household correlation."""
        self._check_fitted()
        return decompose_variance(
            self.result_.sigma_n2,
            counts=[g.n_rows for g in self.design_.groups],
            sizes=[g.mean_size for g in self.design_.groups],
            strict=strict,
        )

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit(panel) before predict/score/decompose")
