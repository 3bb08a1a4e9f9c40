"""Knot selection and truncated-line basis evaluation for the age curves.

The age-intake curve of each sex is an order-1 truncated polynomial spline:
intercept, slope, and one hinge term (a - knot)_+ per knot. Knots sit at
empirical quantiles of the distinct observed ages; the hinge coefficients are
shrunk as random effects by the mixed model, which is what turns the basis
into a penalized spline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

# Knot budget: one knot per four distinct ages, capped by the model option.
KNOTS_PER_DISTINCT_AGES = 4


@dataclass(frozen=True)
class SplineBasis:
    """Truncated-line basis for one curve: strictly increasing interior knots."""

    label: str
    knots: np.ndarray

    @property
    def n_knots(self) -> int:
        return len(self.knots)


def select_knots(distinct_ages, max_knots: int, label: str = "") -> SplineBasis:
    """Place knots at empirical quantiles of the distinct-age list.

    The number of knots is min(floor(n_distinct / 4), max_knots); knot k
    (1-based) is the (k+1)/(K+2) quantile of the distinct ages, computed with
    linear interpolation between order statistics. Duplicate quantiles and
    quantiles falling on the range boundary are dropped, reducing K.

    With fewer than two distinct ages the basis is empty (pure linear fit)
    and a warning is emitted.
    """
    ages = np.unique(np.asarray(distinct_ages, dtype=float))
    if ages.size < 2:
        warnings.warn(
            f"basis {label or '?'}: fewer than 2 distinct ages, falling back to a linear fit",
            stacklevel=2,
        )
        return SplineBasis(label=label, knots=np.empty(0))

    n_knots = min(ages.size // KNOTS_PER_DISTINCT_AGES, max_knots)
    if n_knots <= 0:
        return SplineBasis(label=label, knots=np.empty(0))

    quantiles = (np.arange(1, n_knots + 1) + 1.0) / (n_knots + 2.0)
    knots = np.quantile(ages, quantiles)  # linear-interpolation quantile
    knots = np.unique(knots)
    # Knots must be strictly inside the observed age range.
    knots = knots[(knots > ages[0]) & (knots < ages[-1])]
    return SplineBasis(label=label, knots=knots)


def eval_truncated(age, basis: SplineBasis) -> np.ndarray:
    """Evaluate the hinge terms (age - knot)_+ for one age or an age vector.

    The positive-part indicator is strict: the term is 0 when age equals the
    knot. Returns shape (n_knots,) for a scalar age, else (n_ages, n_knots).
    """
    a = np.asarray(age, dtype=float)
    scalar = a.ndim == 0
    diff = np.atleast_1d(a)[:, None] - basis.knots[None, :]
    out = np.where(diff > 0.0, diff, 0.0)
    return out[0] if scalar else out
