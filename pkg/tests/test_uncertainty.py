import csv
import io
import json
import math

import numpy as np
import pytest

from conftest import response_only_instance
from regem import (
    BootstrapError,
    Dataset,
    ImputationSet,
    ImputedCell,
    RegemError,
    bootstrap_impute,
    build_ancova,
    impute_closed_form,
    multiple_impute,
    solve_augmented_ols,
    two_way_impute,
)

TABLE4_TWO_WAY = {
    "X1@10": 14.4444, "X1@11": 7.8944, "X1@12": 15.6444, "X1@13": 13.1944,
    "X2@10": 53.4444, "X2@11": 46.8944, "X2@12": 54.6444, "X2@13": 52.1944,
    "X4@7": 49.9750, "X4@8": 33.1750, "X4@9": 43.3250, "X4@10": 48.4972,
    "X4@11": 41.9472, "X4@12": 49.6972, "X4@13": 47.2472,
}
TABLE4_TWO_WAY_SE = {"X1@10": 16.8172, "X4@7": 15.7310, "X4@10": 17.1640}


def one_cell(point, se):
    return ImputationSet((ImputedCell("Y", 1, point, se),))


class TestMultipleImpute:
    def test_zero_se(self):
        d = multiple_impute(one_cell(3.5, 0.0), 50, seed=1)
        assert np.all(d.draws["Y@1"] == 3.5)

    def test_clt(self):
        se = math.sqrt(5)
        d = multiple_impute(one_cell(2.0, se), 100_000, seed=11)
        x = d.draws["Y@1"]
        assert abs(x.mean() - 2.0) < 3 * se / math.sqrt(100_000)
        assert abs(x.std(ddof=1) / se - 1) < 0.02

    def test_deterministic(self):
        imp = impute_closed_form(*_resp_only(0))
        a = multiple_impute(imp, 20, seed=5)
        b = multiple_impute(imp, 20, seed=5)
        assert a.to_csv() == b.to_csv()
        assert a.to_csv() != multiple_impute(imp, 20, seed=6).to_csv()

    @pytest.mark.parametrize("M", [0, -3, 2.5])
    def test_invalid_m(self, M):
        with pytest.raises(ValueError):
            multiple_impute(one_cell(1.0, 1.0), M, seed=0)

    def test_nan_se_rejected(self):
        with pytest.raises(ValueError):
            multiple_impute(one_cell(1.0, math.nan), 3, seed=0)

    def test_summary_recomputable(self):
        d = multiple_impute(one_cell(1.0, 2.0), 500, seed=3)
        s = d.summary()["Y@1"]
        x = d.draws["Y@1"]
        assert s["count"] == 500
        np.testing.assert_allclose([s["mean"], s["sd"]], [x.mean(), x.std(ddof=1)])
        np.testing.assert_allclose([s["p2.5"], s["p50"], s["p97.5"]], np.percentile(x, [2.5, 50, 97.5]))

    def test_csv_and_json(self):
        d = multiple_impute(one_cell(1.0, 2.0), 4, seed=3)
        rows = list(csv.reader(io.StringIO(d.to_csv())))
        assert rows[0] == ["cell", "replicate", "value"] and len(rows) == 5
        np.testing.assert_array_equal([float(r[2]) for r in rows[1:]], d.draws["Y@1"])
        doc = json.loads(d.summary_json())
        assert doc["method"] == "normal-mi" and doc["cells"]["Y@1"]["count"] == 4


def _resp_only(seed, **kw):
    d = response_only_instance(np.random.default_rng(seed), **kw)
    return d, d.names[-1]


class TestBootstrap:
    def test_means_near_closed_form(self):
        d, name = _resp_only(21, n=30, k=2, n_m=4)
        draws = bootstrap_impute(d, "closed-form", B=2000, seed=1)
        ref = impute_closed_form(d, name)
        for c in ref.cells:
            x = draws.draws[c.label]
            mc_se = x.std(ddof=1) / math.sqrt(x.size)
            assert abs(x.mean() - c.point) < 3 * mc_se, c.label

    def test_single_replicate(self):
        d, _ = _resp_only(2)
        a = bootstrap_impute(d, B=1, seed=9)
        b = bootstrap_impute(d, B=1, seed=9)
        assert a.accepted == 1 and a.to_csv() == b.to_csv()
        assert set(np.concatenate(list(a.replicates.values()))) <= {0, 1, 2}

    def test_inclusion_count(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=20)
        y = 1 + x + rng.normal(size=20) * 0.5
        y[7] = np.nan
        draws = bootstrap_impute(Dataset.from_array(np.column_stack([x, y])), B=1000, seed=4)
        p = 1 - (19 / 20) ** 20
        sd = math.sqrt(1000 * p * (1 - p))
        assert abs(draws.counts()["X2@8"] - 1000 * p) < 4 * sd

    def test_substreams_are_prefix_stable(self):
        d, _ = _resp_only(3, n=25, k=1, n_m=3)
        short = bootstrap_impute(d, B=10, seed=2)
        long = bootstrap_impute(d, B=20, seed=2)
        assert short.discarded == long.discarded == 0
        for k in short.labels:
            np.testing.assert_array_equal(long.draws[k][: short.draws[k].size], short.draws[k])

    def test_min_valid_discards(self, hald13):
        draws = bootstrap_impute(hald13, "nls", B=30, seed=3, min_valid=0.0)
        assert draws.accepted == 30
        assert draws.accepted + draws.discarded == draws.attempted
        assert draws.discarded > 0
        assert all(np.all(v >= 0) for v in draws.draws.values())

    def test_counts_differ_between_cells(self, hald13):
        draws = bootstrap_impute(hald13, B=40, seed=7)
        assert draws.method == "bootstrap:nls"
        assert len(set(draws.counts().values())) > 1

    def test_abort_when_everything_discarded(self):
        d, _ = _resp_only(4)
        with pytest.raises(BootstrapError, match="discarded"):
            bootstrap_impute(d, B=5, seed=0, min_valid=1e12)

    def test_target_count(self):
        d, _ = _resp_only(5, n=20, k=1, n_m=3)
        draws = bootstrap_impute(d, target_count=50, seed=0)
        assert min(draws.counts().values()) >= 50

    def test_callable_estimator(self):
        d, name = _resp_only(6)
        draws = bootstrap_impute(d, lambda rep: impute_closed_form(rep, name), B=5, seed=0)
        assert draws.accepted == 5

    def test_duplicate_copies_are_averaged(self):
        d, name = _resp_only(8, n=12, k=1, n_m=2)
        seen = {}

        def est(rep):
            imp = impute_closed_form(rep, name)
            cells = tuple(ImputedCell(c.variable, c.row, float(k), 0.0) for k, c in enumerate(imp.cells))
            seen["rep"] = cells
            return ImputationSet(cells)

        draws = bootstrap_impute(d, est, B=1, seed=1)
        rng = np.random.default_rng([1, 0])
        idx = np.sort(rng.integers(0, d.n, d.n))
        for k in draws.labels:
            row = int(k.split("@")[1]) - 1
            copies = [c.point for c in seen["rep"] if idx[c.row - 1] == row]
            if copies:
                np.testing.assert_allclose(draws.draws[k], [np.mean(copies)])

    def test_no_missing(self, hald13):
        with pytest.raises(RegemError):
            bootstrap_impute(hald13.select(["X3", "X5"]), B=2, seed=0)

    def test_bad_estimator(self, hald13):
        with pytest.raises(ValueError):
            bootstrap_impute(hald13, "magic", B=2, seed=0)


class TestTwoWay:
    def test_hald_table4(self, hald13):
        imp = two_way_impute(hald13)
        got = imp.as_dict()
        for k, v in TABLE4_TWO_WAY.items():
            np.testing.assert_allclose(got[k], v, atol=5e-4, err_msg=k)
        for k, v in TABLE4_TWO_WAY_SE.items():
            np.testing.assert_allclose(imp[k].se, v, atol=5e-4, err_msg=k)
        assert "misspecified" in imp.notes[0]

    def test_additive_table(self):
        imp = two_way_impute([[1, 2, 3], [3, 4, np.nan]])
        np.testing.assert_allclose(imp.points, [5.0], atol=1e-12)
        assert imp.labels == ["X3@2"]

    def test_no_missing(self):
        assert len(two_way_impute(np.ones((3, 3)))) == 0

    def test_exactly_additive(self):
        rows = np.array([0.0, 1.5, -2.0, 4.0])
        cols = np.array([10.0, 0.0, 3.0])
        tbl = rows[:, None] + cols[None, :]
        full = tbl.copy()
        tbl[1, 2] = tbl[3, 0] = np.nan
        imp = two_way_impute(tbl)
        np.testing.assert_allclose(imp.points, [full[3, 0], full[1, 2]], atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_augmented_oracle(self, seed):
        rng = np.random.default_rng(seed)
        tbl = rng.normal(size=(4, 1)) + rng.normal(size=(1, 3)) + 0.3 * rng.normal(size=(4, 3))
        cells = rng.choice(12, size=2, replace=False)
        tbl.reshape(-1)[cells] = np.nan
        imp = two_way_impute(tbl)
        # stacked indicator design built independently: row dummies then column dummies
        y = tbl.T.reshape(-1)
        r = np.tile(np.arange(4), 3)
        c = np.repeat(np.arange(3), 4)
        X = np.column_stack([(r == i) for i in range(1, 4)] + [(c == j) for j in range(1, 3)]).astype(float)
        sol = solve_augmented_ols(build_ancova(Dataset.from_array(np.column_stack([X, y])), "X6"))
        # both sides list the cells in stacked (column-major) order
        np.testing.assert_allclose(imp.points, sol.b_m, atol=1e-9)
        np.testing.assert_allclose(imp.ses, sol.s_bm, atol=1e-9)

    def test_all_missing_row(self):
        tbl = np.array([[1.0, 2.0], [np.nan, np.nan], [3.0, 5.0]])
        with pytest.raises(RegemError):
            two_way_impute(tbl)
