"""Serialization of fit results so pipeline stages can hand off via JSON.

A saved fit carries the estimates plus just enough design metadata (column
names and maps, knots, variance groups) to run predictions and Wald tests
without the original matrices. Floats survive the round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .design import GENDER_COLUMNS, POOLED_COLUMNS, VarianceGroup
from .errors import ValidationError
from .splines import SplineBasis


@dataclass(frozen=True)
class DesignMeta:
    """Design metadata reconstructed from a saved fit (no matrices)."""

    fixed_names: tuple
    socio_columns: dict
    week_columns: dict
    bases: dict
    z_names: tuple
    penalty_blocks: tuple
    groups: tuple
    dropped: tuple
    reference: dict
    reference_week: int
    n_rows: int
    n_fixed: int
    n_random: int

    def gender_block(self) -> dict:
        base = GENDER_COLUMNS + POOLED_COLUMNS
        return {name: i for i, name in enumerate(self.fixed_names) if name in base}


@dataclass(frozen=True)
class LoadedFit:
    """Estimates loaded from fit.json; quacks like a FitResult for
    prediction and Wald tests."""

    design: DesignMeta
    method: str
    theta: np.ndarray
    cov_fixed: np.ndarray
    u_blup: np.ndarray
    sigma_u2: tuple
    sigma_n2: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    pinned: tuple


def fit_to_dict(fit, spec=None) -> dict:
    """JSON-ready representation of a fit (FitResult or LoadedFit).

    Passing the ModelSpec records the model options so later pipeline stages
    can re-assemble comparable designs (needed by the structural tests).
    """
    design = fit.design
    se = np.sqrt(np.diag(fit.cov_fixed))
    extra = {}
    if spec is not None:
        extra["spec"] = {
            "gender_split": spec.gender_split,
            "shared_penalty": spec.shared_penalty,
            "max_group_size": spec.max_group_size,
            "reference_week": spec.reference_week,
            "socio_reference": spec.socio_reference,
            "max_knots": spec.max_knots,
            "min_group_rows": spec.min_group_rows,
        }
    return {
        **extra,
        "method": fit.method,
        "loglik": fit.loglik,
        "converged": bool(fit.converged),
        "n_iter": int(fit.n_iter),
        "grad_norm": float(fit.grad_norm),
        "pinned": list(fit.pinned),
        "n_rows": int(design.n_rows),
        "n_fixed": int(design.n_fixed),
        "n_random": int(design.n_random),
        "fixed_effects": [
            {"name": name, "estimate": float(est), "se": float(s)}
            for name, est, s in zip(design.fixed_names, fit.theta, se)
        ],
        "cov_fixed": [[float(v) for v in row] for row in np.asarray(fit.cov_fixed)],
        "u_blup": [float(v) for v in fit.u_blup],
        "z_names": list(design.z_names),
        "penalty_blocks": [
            {"label": label, "start": int(start), "stop": int(stop)}
            for label, start, stop in design.penalty_blocks
        ],
        "sigma_u2": [float(v) for v in fit.sigma_u2],
        "variance_groups": [
            {
                "label": g.label,
                "mean_size": float(g.mean_size),
                "n_rows": int(g.n_rows),
                "sigma2": float(s2),
            }
            for g, s2 in zip(design.groups, fit.sigma_n2)
        ],
        "bases": {
            key: {"label": basis.label, "knots": [float(k) for k in basis.knots]}
            for key, basis in design.bases.items()
        },
        "socio_columns": [
            {"variable": var, "modality": int(code), "column": int(j)}
            for (var, code), j in sorted(design.socio_columns.items())
        ],
        "week_columns": [
            {"week": int(week), "column": int(j)}
            for week, j in sorted(design.week_columns.items())
        ],
        "dropped_columns": list(design.dropped),
        "reference": {var: int(code) for var, code in sorted(design.reference.items())},
        "reference_week": int(design.reference_week),
    }


def save_fit(fit, path, spec=None) -> None:
    payload = fit_to_dict(fit, spec=spec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def spec_from_dict(payload: dict):
    """ModelSpec recorded in a fit file, or None when absent."""
    from .types import ModelSpec

    entry = payload.get("spec")
    if entry is None:
        return None
    return ModelSpec(
        gender_split=bool(entry["gender_split"]),
        shared_penalty=bool(entry["shared_penalty"]),
        max_group_size=int(entry["max_group_size"]),
        reference_week=int(entry["reference_week"]),
        socio_reference=entry["socio_reference"],
        max_knots=int(entry["max_knots"]),
        min_group_rows=int(entry["min_group_rows"]),
    )


def fit_from_dict(payload: dict) -> LoadedFit:
    try:
        bases = {
            key: SplineBasis(
                label=entry["label"], knots=np.asarray(entry["knots"], dtype=float)
            )
            for key, entry in payload["bases"].items()
        }
        design = DesignMeta(
            fixed_names=tuple(e["name"] for e in payload["fixed_effects"]),
            socio_columns={
                (e["variable"], e["modality"]): e["column"]
                for e in payload["socio_columns"]
            },
            week_columns={e["week"]: e["column"] for e in payload["week_columns"]},
            bases=bases,
            z_names=tuple(payload["z_names"]),
            penalty_blocks=tuple(
                (e["label"], e["start"], e["stop"]) for e in payload["penalty_blocks"]
            ),
            groups=tuple(
                VarianceGroup(
                    label=e["label"], mean_size=e["mean_size"], n_rows=e["n_rows"]
                )
                for e in payload["variance_groups"]
            ),
            dropped=tuple(payload["dropped_columns"]),
            reference=dict(payload["reference"]),
            reference_week=int(payload["reference_week"]),
            n_rows=int(payload["n_rows"]),
            n_fixed=int(payload["n_fixed"]),
            n_random=int(payload["n_random"]),
        )
        return LoadedFit(
            design=design,
            method=payload["method"],
            theta=np.asarray([e["estimate"] for e in payload["fixed_effects"]], dtype=float),
            cov_fixed=np.asarray(payload["cov_fixed"], dtype=float),
            u_blup=np.asarray(payload["u_blup"], dtype=float),
            sigma_u2=tuple(float(v) for v in payload["sigma_u2"]),
            sigma_n2=np.asarray(
                [e["sigma2"] for e in payload["variance_groups"]], dtype=float
            ),
            loglik=float(payload["loglik"]),
            converged=bool(payload["converged"]),
            n_iter=int(payload["n_iter"]),
            grad_norm=float(payload["grad_norm"]),
            pinned=tuple(payload["pinned"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed fit file: missing or bad field {exc}") from exc


def load_fit(path) -> LoadedFit:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"fit file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return fit_from_dict(payload)


def roundtrip_equal(fit_a, fit_b) -> bool:
    """True when two fits carry identical estimates (serialization check)."""
    return (
        fit_a.method == fit_b.method
        and np.array_equal(fit_a.theta, fit_b.theta)
        and np.array_equal(fit_a.cov_fixed, fit_b.cov_fixed)
        and np.array_equal(fit_a.u_blup, fit_b.u_blup)
        and fit_a.sigma_u2 == fit_b.sigma_u2
        and np.array_equal(fit_a.sigma_n2, fit_b.sigma_n2)
        and fit_a.loglik == fit_b.loglik
    )
