import numpy as np
import pytest

from regem import CSVParseError, DataError, Dataset, load_csv, loads_csv, validate
from regem.dataset import (
    COMPLEMENTARY_BIVARIATE,
    COMPLETE,
    GENERAL_MULTIVARIATE,
    RESPONSE_ONLY,
    hald13_csv_path,
)


class TestDataset:
    def test_missing_cells_are_zero_filled(self):
        d = Dataset.from_array([[1.0, np.nan], [np.nan, 4.0]])
        np.testing.assert_array_equal(d.values, [[1.0, 0.0], [0.0, 4.0]])
        np.testing.assert_array_equal(d.mask, [[True, False], [False, True]])

    def test_arrays_are_read_only(self):
        d = Dataset.from_array([[1.0, 2.0]])
        with pytest.raises(ValueError):
            d.values[0, 0] = 5.0

    def test_input_is_copied(self):
        v = np.array([[1.0, 2.0]])
        d = Dataset(v, np.ones((1, 2), bool))
        v[0, 0] = 99.0
        assert d.values[0, 0] == 1.0

    def test_default_names(self):
        assert Dataset.from_array(np.zeros((2, 3))).names == ("X1", "X2", "X3")

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 2)), np.ones((2, 3), bool))

    def test_observed_zero_is_kept_distinct_from_missing(self):
        d = Dataset.from_array([[0.0, np.nan]])
        assert d.mask[0, 0] and not d.mask[0, 1]

    def test_missing_cells_column_major(self):
        d = Dataset.from_array([[np.nan, np.nan], [1, np.nan], [np.nan, 2]])
        assert d.missing_cells() == [(0, 0), (2, 0), (0, 1), (1, 1)]


class TestLoadCsv:
    def test_hald_file(self):
        d = load_csv(hald13_csv_path())
        assert d.names == ("X1", "X2", "X3", "X4", "X5")
        assert (~d.mask).sum() == 15
        assert set(np.flatnonzero(~d.mask[:, 0]) + 1) == {10, 11, 12, 13}
        assert set(np.flatnonzero(~d.mask[:, 1]) + 1) == {10, 11, 12, 13}
        assert set(np.flatnonzero(~d.mask[:, 3]) + 1) == set(range(7, 14))

    def test_file_matches_embedded(self, hald13):
        d = load_csv(hald13_csv_path())
        np.testing.assert_array_equal(d.values, hald13.values)
        np.testing.assert_array_equal(d.mask, hald13.mask)

    def test_complete_csv(self):
        d = loads_csv("a,b\n1,2\n3,4\n")
        assert d.mask.all()

    @pytest.mark.parametrize("token", ["", ".", "NA", " . "])
    def test_default_tokens(self, token):
        d = loads_csv(f"a,b\n1,{token}\n3,4\n")
        assert not d.mask[0, 1]

    def test_custom_tokens(self):
        d = loads_csv("a,b\n1,-999\n3,4\n", missing_tokens={"-999"})
        assert not d.mask[0, 1]

    def test_ragged_row_reports_line(self):
        with pytest.raises(CSVParseError, match="line 3"):
            loads_csv("a,b\n1,2\n3\n")

    def test_non_numeric(self):
        with pytest.raises(CSVParseError, match="non-numeric"):
            loads_csv("a,b\n1,x\n")

    def test_empty(self):
        with pytest.raises(CSVParseError):
            loads_csv("")

    def test_blank_lines_skipped(self):
        assert loads_csv("a,b\n1,2\n\n3,4\n").n == 2

    def test_all_missing_row_fails_validation(self):
        d = loads_csv("a,b\n1,2\n.,.\n")
        with pytest.raises(DataError, match="row\\(s\\) 2"):
            validate(d)

    def test_round_trip_preserves_mask(self, hald13, tmp_path):
        path = tmp_path / "h.csv"
        hald13.to_csv(path)
        back = load_csv(path)
        np.testing.assert_array_equal(back.mask, hald13.mask)
        np.testing.assert_array_equal(back.values, hald13.values)


class TestValidate:
    def test_hald13(self, hald13):
        pat = validate(hald13)
        assert pat.classification == GENERAL_MULTIVARIATE
        assert pat.n_missing == {"X1": 4, "X2": 4, "X3": 0, "X4": 7, "X5": 0}
        assert pat.total_observed == 50
        assert pat.total_missing == 15

    def test_complete(self):
        assert validate(Dataset.from_array(np.ones((5, 2)))).classification == COMPLETE

    def test_complementary_bivariate(self):
        d = Dataset.from_array([[1, 2], [np.nan, 3], [4, np.nan], [5, 6]])
        assert validate(d).classification == COMPLEMENTARY_BIVARIATE

    def test_response_only(self):
        d = Dataset.from_array([[1, 2, np.nan], [3, 4, 5]])
        assert validate(d).classification == RESPONSE_ONLY

    def test_row_sets_partition(self, hald13):
        pat = validate(hald13)
        for name in hald13.names:
            both = np.concatenate([pat.missing_rows[name], pat.observed_rows[name]])
            np.testing.assert_array_equal(np.sort(both), np.arange(hald13.n))


class TestEmbeddedHald:
    def test_first_row(self, hald13):
        np.testing.assert_array_equal(hald13.values[0], [7, 26, 6, 60, 78.5])

    def test_row_ten(self, hald13):
        np.testing.assert_array_equal(hald13.mask[9], [False, False, True, False, True])
        assert hald13.values[9, 2] == 4 and hald13.values[9, 4] == 115.9

    def test_x3_mean(self, hald13):
        np.testing.assert_allclose(hald13.values[:, 2].mean(), 153 / 13, rtol=1e-12)
