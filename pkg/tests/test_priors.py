"""Prior construction: anatomical arithmetic, tag gating, perturbation, tag-free selection."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdalab import priors


class TestAnatomical:
    def test_ivd_pixels_and_ratio(self):
        size_px, ratio = priors.tau_bar(priors.AnatomicalEntry(1, 2784.0, 1.25, 1.25, 65536))
        assert size_px == pytest.approx(1781.76, abs=1e-9)
        assert abs(size_px - 1782) <= 0.5
        assert abs(100 * ratio - 2.72) < 0.01
        assert ratio == pytest.approx(0.027188, abs=1e-6)

    def test_ratio_one_rejected(self):
        with pytest.raises(priors.PriorError, match="exceeds"):
            priors.tau_bar(priors.AnatomicalEntry(1, 2.0 * 3.0 * 10, 2.0, 3.0, 10))

    def test_invalid_entry(self):
        with pytest.raises(priors.PriorError):
            priors.AnatomicalEntry(1, -5.0, 1.0, 1.0, 100)

    @pytest.mark.parametrize("row", priors.ANATOMICAL_REFERENCE, ids=lambda r: r[0])
    def test_reference_rows_within_two_percent(self, row):
        name, size, r1, r2, omega, printed_px, printed_pct = row
        size_px, ratio = priors.tau_bar(priors.AnatomicalEntry(1, size, r1, r2, omega, name))
        # independent arithmetic
        assert size_px == pytest.approx(size / (r1 * r2), rel=1e-12)
        assert abs(size_px - printed_px) / printed_px < 0.02
        assert abs(100 * ratio - printed_pct) / printed_pct < 0.02

    def test_cardiac_background(self):
        full = priors.cardiac_table().full
        assert full[0] == pytest.approx(0.7312, abs=1e-12)
        assert full.sum() == pytest.approx(1.0, abs=1e-12)


class TestPriorTable:
    def test_bounds(self):
        with pytest.raises(priors.PriorError):
            priors.PriorTable(2, (0.6,))
        with pytest.raises(priors.PriorError):
            priors.PriorTable(3, (0.1,))

    def test_json_roundtrip(self, tmp_path):
        table = priors.PriorTable(3, (0.05, 0.1))
        priors.save_prior_table(table, tmp_path / "p.json")
        assert priors.load_prior_table(tmp_path / "p.json") == table

    def test_load_anatomical_entries(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps([{"class": 1, "size_mm2": 2784, "R1": 1.25, "R2": 1.25,
                                     "omega": 65536}]))
        table = priors.load_prior_table(path)
        assert table.foreground[0] == pytest.approx(1781.76 / 65536)

    def test_load_missing_field(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps([{"class": 1, "size_mm2": 10}]))
        with pytest.raises(priors.PriorError, match="lacks field"):
            priors.load_prior_table(path)

    def test_load_missing_class(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps([{"class": 2, "tau_bar": 0.1}]))
        with pytest.raises(priors.PriorError, match="no prior"):
            priors.load_prior_table(path, 3)


class TestTauE:
    def test_all_absent(self):
        np.testing.assert_array_equal(priors.tau_e(priors.cardiac_table(), [0, 0, 0, 0]), [1, 0, 0, 0, 0])

    def test_binary_present(self):
        np.testing.assert_allclose(priors.tau_e(priors.PriorTable(2, (0.05,)), [1]), [0.95, 0.05])

    def test_cardiac_all_present(self):
        out = priors.tau_e(priors.cardiac_table(), [1, 1, 1, 1])
        assert out[0] == pytest.approx(0.7312, abs=1e-12)

    def test_wrong_tag_length(self):
        with pytest.raises(priors.PriorError):
            priors.tau_e(priors.PriorTable(2, (0.05,)), [1, 0])

    @settings(max_examples=60)
    @given(st.lists(st.booleans(), min_size=4, max_size=4), st.integers(0, 3))
    def test_simplex_and_monotone(self, tags, extra):
        table = priors.cardiac_table()
        base = priors.tau_e(table, tags)
        assert (base >= 0).all() and abs(base.sum() - 1) < 1e-12
        more = list(tags)
        more[extra] = True
        assert priors.tau_e(table, more)[extra + 1] >= base[extra + 1]


class TestPerturb:
    def test_identity(self):
        np.testing.assert_array_equal(priors.perturb(np.array([0.95, 0.05]), 0.0, 1), [0.95, 0.05])

    def test_examples(self):
        np.testing.assert_allclose(priors.perturb([0.95, 0.05], 0.2, 1), [0.94, 0.06], atol=1e-15)
        np.testing.assert_allclose(priors.perturb([0.95, 0.05], 0.6, -1), [0.98, 0.02], atol=1e-15)

    def test_overflow(self):
        with pytest.raises(priors.PriorError):
            priors.perturb([0.2, 0.4, 0.4], 0.5, 1)

    def test_bad_sign_and_delta(self):
        with pytest.raises(priors.PriorError):
            priors.perturb([0.9, 0.1], 0.2, 0)
        with pytest.raises(priors.PriorError):
            priors.perturb([0.9, 0.1], 1.0, 1)

    @settings(max_examples=60)
    @given(st.sampled_from([0.0, 0.2, 0.4, 0.6]), st.sampled_from([1, -1]),
           st.lists(st.booleans(), min_size=4, max_size=4))
    def test_foreground_scaled_exactly(self, delta, sign, tags):
        tau = priors.tau_e(priors.cardiac_table(), tags)
        out = priors.perturb(tau, delta, sign)
        np.testing.assert_array_equal(out[1:], tau[1:] * (1 + sign * delta))
        assert (out >= 0).all() and abs(out.sum() - 1) < 1e-12


class TestTauGT:
    def test_background_only(self):
        np.testing.assert_array_equal(priors.tau_gt(np.zeros((4, 4), int), 3), [1, 0, 0])

    def test_square(self):
        m = np.zeros((64, 64), int)
        m[10:26, 20:36] = 1
        np.testing.assert_array_equal(priors.tau_gt(m, 2), [0.9375, 0.0625])

    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_simplex(self, seed, k):
        m = np.random.default_rng(seed).integers(0, k, (7, 9))
        out = priors.tau_gt(m, k)
        assert abs(out.sum() - 1) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(priors.PriorError):
            priors.tau_gt(np.array([[0, 3]]), 2)


class TestTagFree:
    table = priors.PriorTable(2, (0.05,))

    def test_above_quarter_selected(self):
        d = priors.tagfree_estimate([0.975, 0.025], self.table)
        assert d.selected
        np.testing.assert_allclose(d.tau_e, [0.95, 0.05])

    def test_near_zero_selected_as_absent(self):
        d = priors.tagfree_estimate([1 - 1e-7, 1e-7], self.table)
        assert d.selected
        np.testing.assert_array_equal(d.tau_e, [1.0, 0.0])

    def test_between_discarded(self):
        d = priors.tagfree_estimate([0.995, 0.005], self.table, zero_tol=1e-4)
        assert not d.selected and d.tau_e is None and d.reasons == ["ambiguous"]

    def test_one_ambiguous_class_discards_image(self):
        table = priors.PriorTable(3, (0.05, 0.1))
        d = priors.tagfree_estimate([0.9, 0.09, 0.01], table)
        assert not d.selected and d.reasons == ["present", "ambiguous"]


class TestTagsFile:
    def test_roundtrip(self, tmp_path):
        tags = {"a": np.array([True, False]), "b": np.array([False, True])}
        priors.write_tags_csv(tmp_path / "t.csv", tags)
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "sample_id,class,present"
        back = priors.read_tags_csv(tmp_path / "t.csv", 3)
        for k in tags:
            np.testing.assert_array_equal(back[k], tags[k])

    def test_class_out_of_range(self, tmp_path):
        (tmp_path / "t.csv").write_text("sample_id,class,present\na,0,1\n")
        with pytest.raises(priors.PriorError):
            priors.read_tags_csv(tmp_path / "t.csv", 2)
