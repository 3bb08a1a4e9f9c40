"""Fit serialization: exact float round-trip, prediction hand-off, errors."""

import json

import numpy as np
import pytest

from kdem.errors import ValidationError
from kdem.inference import f_test, parse_hypothesis
from kdem.io import (
    LoadedFit,
    fit_from_dict,
    fit_to_dict,
    load_fit,
    roundtrip_equal,
    save_fit,
    spec_from_dict,
)
from kdem.reml import predict_individual


@pytest.fixture()
def saved(small_fit, small_spec, tmp_path):
    path = tmp_path / "fit.json"
    save_fit(small_fit, path, spec=small_spec)
    return path


class TestRoundTrip:
    def test_estimates_survive_exactly(self, small_fit, saved):
        loaded = load_fit(saved)
        assert isinstance(loaded, LoadedFit)
        assert roundtrip_equal(small_fit, loaded)
        # bit-exact floats, not merely close
        assert loaded.loglik == small_fit.loglik
        assert np.array_equal(loaded.theta, small_fit.theta)
        assert np.array_equal(loaded.cov_fixed, small_fit.cov_fixed)
        assert np.array_equal(loaded.u_blup, small_fit.u_blup)
        assert loaded.sigma_u2 == tuple(small_fit.sigma_u2)
        assert loaded.grad_norm == small_fit.grad_norm
        assert loaded.n_iter == small_fit.n_iter
        assert loaded.converged == small_fit.converged

    def test_design_metadata_survive(self, small_fit, saved):
        loaded = load_fit(saved)
        design = small_fit.design
        meta = loaded.design
        assert meta.fixed_names == design.fixed_names
        assert meta.socio_columns == design.socio_columns
        assert meta.week_columns == design.week_columns
        assert meta.penalty_blocks == design.penalty_blocks
        assert meta.z_names == design.z_names
        assert meta.reference == design.reference
        assert meta.reference_week == design.reference_week
        assert meta.n_rows == design.n_rows
        assert meta.n_fixed == design.n_fixed
        assert meta.n_random == design.n_random
        assert tuple(g.label for g in meta.groups) == tuple(
            g.label for g in design.groups
        )
        for key, basis in design.bases.items():
            np.testing.assert_array_equal(meta.bases[key].knots, basis.knots)

    def test_predictions_from_loaded_fit_match(self, small_panel, small_fit, saved):
        panel, _ = small_panel
        loaded = load_fit(saved)
        original = predict_individual(small_fit, panel)
        reloaded = predict_individual(loaded, panel)
        np.testing.assert_array_equal(original.active, reloaded.active)
        np.testing.assert_allclose(original.yhat, reloaded.yhat, atol=1e-12)

    def test_wald_tests_from_loaded_fit_match(self, small_fit, saved):
        loaded = load_fit(saved)
        for text in ("g1=0", "g1=g2"):
            rep_a = f_test(small_fit, parse_hypothesis(text, small_fit.design))
            rep_b = f_test(loaded, parse_hypothesis(text, loaded.design))
            assert rep_a.statistic == pytest.approx(rep_b.statistic, rel=1e-14)
            assert rep_a.p_value == pytest.approx(rep_b.p_value, rel=1e-14)
            assert rep_a.df == rep_b.df

    def test_second_round_trip_is_identical(self, saved, tmp_path):
        loaded = load_fit(saved)
        path2 = tmp_path / "fit2.json"
        save_fit(loaded, path2)
        again = load_fit(path2)
        assert roundtrip_equal(loaded, again)

    def test_roundtrip_equal_detects_differences(self, small_fit, saved):
        loaded = load_fit(saved)
        object.__setattr__(loaded, "theta", loaded.theta + 1e-9)
        assert not roundtrip_equal(small_fit, loaded)


class TestFileFormat:
    def test_spec_recorded_and_restored(self, small_spec, saved):
        payload = json.loads(saved.read_text())
        restored = spec_from_dict(payload)
        assert restored.max_knots == small_spec.max_knots
        assert restored.min_group_rows == small_spec.min_group_rows
        assert restored.gender_split == small_spec.gender_split
        assert restored.max_group_size == small_spec.max_group_size

    def test_spec_absent_gives_none(self, small_fit, tmp_path):
        path = tmp_path / "bare.json"
        save_fit(small_fit, path)
        assert spec_from_dict(json.loads(path.read_text())) is None

    def test_fixed_effects_carry_name_estimate_se(self, small_fit, saved):
        payload = json.loads(saved.read_text())
        rows = payload["fixed_effects"]
        assert [r["name"] for r in rows] == list(small_fit.design.fixed_names)
        se = np.sqrt(np.diag(small_fit.cov_fixed))
        for r, est, s in zip(rows, small_fit.theta, se):
            assert r["estimate"] == est
            assert r["se"] == pytest.approx(s, rel=1e-15)

    def test_variance_groups_carry_labels_and_sizes(self, small_fit, saved):
        payload = json.loads(saved.read_text())
        rows = payload["variance_groups"]
        assert [r["label"] for r in rows] == [g.label for g in small_fit.design.groups]
        np.testing.assert_array_equal(
            [r["sigma2"] for r in rows], small_fit.sigma_n2
        )


class TestErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            load_fit(tmp_path / "absent.json")

    def test_missing_field_rejected(self, saved):
        payload = json.loads(saved.read_text())
        del payload["sigma_u2"]
        with pytest.raises(ValidationError, match="malformed fit file"):
            fit_from_dict(payload)

    def test_bad_field_type_rejected(self, saved):
        payload = json.loads(saved.read_text())
        payload["fixed_effects"] = "oops"
        with pytest.raises(ValidationError, match="malformed fit file"):
            fit_from_dict(payload)
