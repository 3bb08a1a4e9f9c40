"""Core domain types: ages, activity, contaminant kinetics, intake matrices."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kdem.errors import ValidationError
from kdem.types import (
    ACTIVE_AGE_YEARS,
    METHYLMERCURY,
    WEEKS_PER_YEAR,
    Contaminant,
    Household,
    IntakeMatrix,
    IntakeSeriesHousehold,
    Member,
    ModelSpec,
)


class TestMemberAges:
    def test_age_zero_at_birth_week(self):
        m = Member("m1", "h1", "M", birth_week=10)
        assert m.age_years(10) == 0.0

    def test_age_clamped_before_birth(self):
        m = Member("m1", "h1", "M", birth_week=10)
        assert m.age_years(1) == 0.0

    def test_one_year_after_weeks_per_year(self):
        m = Member("m1", "h1", "F", birth_week=0)
        assert m.age_years(round(WEEKS_PER_YEAR)) == pytest.approx(1.0, abs=0.01)

    def test_active_threshold(self):
        m = Member("m1", "h1", "M", birth_week=1)
        first_active = 1 + math.ceil(ACTIVE_AGE_YEARS * WEEKS_PER_YEAR)
        assert not m.is_active(first_active - 1)
        assert m.is_active(first_active)

    def test_bad_sex_rejected(self):
        with pytest.raises(ValidationError, match="sex"):
            Member("m1", "h1", "X", birth_week=1)

    @given(birth=st.integers(-5000, 100), week=st.integers(1, 60))
    def test_age_formula(self, birth, week):
        m = Member("m", "h", "M", birth_week=birth)
        assert m.age_years(week) == max((week - birth) / WEEKS_PER_YEAR, 0.0)


class TestContaminant:
    def test_methylmercury_parameters(self):
        assert METHYLMERCURY.half_life_weeks == 6.0
        assert METHYLMERCURY.ptwi == 1.6

    def test_dissipation_rate(self):
        assert METHYLMERCURY.dissipation_rate == pytest.approx(math.log(2) / 6, rel=1e-15)

    def test_retention_factor_is_half_after_half_life(self):
        # six weekly retentions compound to one halving
        assert METHYLMERCURY.retention_factor**6 == pytest.approx(0.5, rel=1e-12)

    @pytest.mark.parametrize("hl,ptwi", [(0.0, 1.6), (-1.0, 1.6), (6.0, 0.0), (6.0, -2.0)])
    def test_invalid_parameters(self, hl, ptwi):
        with pytest.raises(ValidationError):
            Contaminant("x", half_life_weeks=hl, ptwi=ptwi)


class TestHousehold:
    def test_active_size_counts_only_old_enough(self):
        adult = Member("a", "h", "M", birth_week=-2000)
        infant = Member("b", "h", "F", birth_week=1)
        hh = Household("h", (adult, infant), socio=np.ones((4, 4), dtype=int))
        assert hh.active_size(2) == 1

    def test_intake_series_rejects_non_finite(self):
        with pytest.raises(ValidationError, match="non-finite"):
            IntakeSeriesHousehold("h", np.array([1.0, np.nan]))


class TestIntakeMatrix:
    def _matrix(self):
        members = (
            Member("m1", "h1", "M", birth_week=-500),
            Member("m2", "h1", "F", birth_week=-300),
        )
        yhat = np.array([[1.0, -2.0, 3.0], [4.0, 5.0, 6.0]])
        active = np.ones((2, 3), dtype=bool)
        return IntakeMatrix(members=members, yhat=yhat, active=active)

    def test_clamped_zeroes_negatives_only(self):
        m = self._matrix()
        clamped = m.clamped()
        assert clamped[0, 1] == 0.0
        assert clamped[1, 1] == 5.0
        assert m.yhat[0, 1] == -2.0  # raw values preserved

    def test_scaled(self):
        m = self._matrix()
        s = m.scaled(2.0)
        np.testing.assert_allclose(s.yhat, 2.0 * m.yhat)
        assert s.members == m.members

    def test_row_lookup(self):
        m = self._matrix()
        assert m.row("m2") == 1
        with pytest.raises(KeyError):
            m.row("nope")

    def test_shape_mismatch_rejected(self):
        members = (Member("m1", "h1", "M", birth_week=-500),)
        with pytest.raises(ValidationError):
            IntakeMatrix(members=members, yhat=np.zeros((2, 3)), active=np.ones((2, 3), bool))

    def test_non_finite_active_rejected(self):
        members = (Member("m1", "h1", "M", birth_week=-500),)
        yhat = np.array([[np.nan, 1.0]])
        with pytest.raises(ValidationError):
            IntakeMatrix(members=members, yhat=yhat, active=np.ones((1, 2), bool))

    def test_non_finite_inactive_tolerated(self):
        members = (Member("m1", "h1", "M", birth_week=-500),)
        yhat = np.array([[np.nan, 1.0]])
        active = np.array([[False, True]])
        m = IntakeMatrix(members=members, yhat=yhat, active=active)
        assert m.yhat.shape == (1, 2)


class TestModelSpec:
    def test_defaults(self):
        spec = ModelSpec()
        assert spec.gender_split is True
        assert spec.shared_penalty is True
        assert spec.max_knots == 35
        assert spec.reference_week == 1
        assert spec.max_group_size == 6
        assert spec.min_group_rows == 10

    def test_invalid_values_rejected(self):
        with pytest.raises(ValidationError):
            ModelSpec(max_knots=-1)
        with pytest.raises(ValidationError):
            ModelSpec(max_group_size=0)
