"""Shared fixtures: small synthetic panels and fits reused across test files."""

import warnings

import pytest

from kdem.design import assemble
from kdem.reml import fit_reml
from kdem.synth import DEFAULT_BODYWEIGHT_ROWS, DEFAULT_CONTAMINATION_ROWS, TruthConfig, generate, write_panel
from kdem.types import ModelSpec


@pytest.fixture(scope="session")
def small_panel():
    """20 households x 8 weeks with known truth; enough rows for every group."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        panel, truth = generate(TruthConfig(n_households=20, n_weeks=8, seed=3))
    return panel, truth


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(max_knots=3, min_group_rows=5)


@pytest.fixture(scope="session")
def small_design(small_panel, small_spec):
    panel, _ = small_panel
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return assemble(panel, small_spec)


@pytest.fixture(scope="session")
def small_fit(small_design, small_spec):
    return fit_reml(small_design, small_spec)


@pytest.fixture(scope="session")
def year_panel():
    """A full 53-week panel (long-term risk defined past the 36-week burn-in)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        panel, truth = generate(TruthConfig(n_households=15, n_weeks=53, seed=5))
    return panel, truth


@pytest.fixture(scope="session")
def panel_dir(year_panel, tmp_path_factory):
    """The year panel written out in the on-disk CSV layout."""
    panel, truth = year_panel
    out = tmp_path_factory.mktemp("panel") / "data"
    write_panel(panel, out, truth=truth)
    return out


@pytest.fixture()
def contamination_rows():
    return list(DEFAULT_CONTAMINATION_ROWS)


@pytest.fixture()
def bodyweight_rows():
    return list(DEFAULT_BODYWEIGHT_ROWS)
