import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from regem import build_concatenated, impute_closed_form, solve_concatenated
from regem.cli import RunConfig, execute, main, render_report
from regem.dataset import hald13_csv_path

HALD = str(hald13_csv_path())


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def response_only_csv(tmp_path_factory, hald13):
    path = tmp_path_factory.mktemp("data") / "x4.csv"
    hald13.take_rows(range(9)).select(["X1", "X2", "X3", "X4", "X5"]).to_csv(path)
    return str(path)


def cells(report):
    return {c["cell"]: c for c in report["cells"]}


class TestImpute:
    def test_nls_report(self, tmp_path):
        out = tmp_path / "r.json"
        code, _, err = run("impute", "--method", "nls", "--input", HALD, "--out", str(out))
        assert code == 0, err
        rep = json.loads(out.read_text())
        assert rep["schema"] == 1 and rep["method"] == "nls"
        np.testing.assert_allclose(cells(rep)["X1@10"]["point"], 12.8907, atol=5e-3)
        assert rep["convergence"]["converged"]
        meta = rep["metadata"]
        assert meta["defaults"]["tol_nls"] == 1e-12 and meta["defaults"]["tol_em"] == 1e-10
        assert meta["defaults"]["max_iter"] == 500 and meta["defaults"]["df_convention"] == "raw"
        assert meta["parameters"]["tol"] == 1e-12

    def test_df_convention_both(self):
        code, out, _ = run("impute", "--method", "nls", "--input", HALD, "--df-convention", "both")
        se = cells(json.loads(out))["X1@10"]["se"]
        assert set(se) == {"nls-raw", "nls-adjusted"}
        np.testing.assert_allclose(se["nls-adjusted"], se["nls-raw"] * np.sqrt(3), rtol=1e-12)

    def test_matches_library_exactly(self, tmp_path):
        out = tmp_path / "r.json"
        run("impute", "--method", "nls", "--input", HALD, "--out", str(out))
        lib = execute(RunConfig(input=HALD, method="nls"))
        assert out.read_text() == render_report(lib.report)
        res = solve_concatenated(build_concatenated(__import__("regem").load_csv(HALD)))
        rep = json.loads(out.read_text())
        for c, v, se in zip(res.imputations().cells, res.cell_values, res.imputations().ses):
            assert cells(rep)[c.label]["point"] == float(v)
            assert cells(rep)[c.label]["se"]["nls-raw"] == float(se)

    def test_em_trace_single_row(self, tmp_path, response_only_csv):
        trace = tmp_path / "t.csv"
        code, out, err = run(
            "impute", "--method", "em", "--init", "complete-case", "--input", response_only_csv,
            "--trace-out", str(trace),
        )
        assert code == 0, err
        rows = trace.read_text().splitlines()
        assert len(rows) == 2 and rows[1].startswith("0,")
        assert json.loads(out)["convergence"]["iterations"] == 0

    def test_em_custom_init(self, response_only_csv):
        code, out, _ = run("impute", "--method", "em", "--init", "0,0,0,0,0", "--input", response_only_csv)
        rep = json.loads(out)
        assert code == 0 and rep["convergence"]["iterations"] > 1

    def test_bootstrap_deterministic(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            code, _, err = run("impute", "--method", "bootstrap", "--input", HALD, "--seed", "7", "--B", "100",
                               "--draws-out", str(p), "--out", str(tmp_path / "r.json"))
            assert code == 0, err
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_mi(self, response_only_csv):
        code, out, _ = run("impute", "--method", "mi", "--input", response_only_csv, "--M", "200", "--seed", "1")
        rep = json.loads(out)
        ref = impute_closed_form(__import__("regem").load_csv(response_only_csv), "X4")
        for c in ref.cells:
            got = cells(rep)[c.label]
            assert got["count"] == 200
            assert abs(got["point"] - c.point) < 4 * c.se / np.sqrt(200)

    def test_constrained(self, tmp_path):
        spec = tmp_path / "c.json"
        spec.write_text('{"lower_bounds": [{"variable": "X1", "row": 11, "value": 0}]}')
        code, out, err = run("impute", "--method", "constrained", "--input", HALD, "--constraints", str(spec))
        assert code == 0, err
        c = cells(json.loads(out))["X1@11"]
        assert c["point"] == 0.0 and c["se"]["nls-raw"] == 0.0 and c["at_bound"]

    def test_closed_form_with_total(self, tmp_path, response_only_csv):
        spec = tmp_path / "t.json"
        spec.write_text('{"variables": {"X4": {"mode": "total-linear", "total": 72}}}')
        code, out, err = run("impute", "--method", "closed-form", "--input", response_only_csv,
                             "--constraints", str(spec))
        assert code == 0, err
        np.testing.assert_allclose(sum(c["point"] for c in json.loads(out)["cells"]), 72.0, atol=1e-10)

    def test_two_way_note(self):
        code, out, _ = run("impute", "--method", "two-way", "--input", HALD)
        rep = json.loads(out)
        assert code == 0 and "misspecified" in rep["notes"][0]


class TestErrors:
    def test_missing_seed(self):
        code, _, err = run("impute", "--method", "bootstrap", "--input", HALD)
        assert code == 2
        assert json.loads(err)["error"]["message"] == "method bootstrap needs --seed"

    def test_unreadable_input(self, tmp_path):
        code, _, err = run("impute", "--method", "nls", "--input", str(tmp_path / "nope.csv"))
        assert code == 2 and json.loads(err)["schema"] == 1

    def test_bad_method(self):
        code, _, err = run("impute", "--method", "magic", "--input", HALD)
        assert code == 2 and "invalid choice" in json.loads(err)["error"]["message"]

    def test_estimator_error(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,.\n1,2\n1,3\n")
        code, _, err = run("impute", "--method", "closed-form", "--input", str(p))
        assert code == 1 and json.loads(err)["error"]["type"] == "SingularSystemError"

    def test_em_on_multivariate(self):
        code, _, err = run("impute", "--method", "em", "--input", HALD)
        assert code == 2 and "single incomplete response" in json.loads(err)["error"]["message"]

    def test_parse_error(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n3\n")
        code, _, err = run("impute", "--method", "nls", "--input", str(p))
        assert code == 1 and "line 3" in json.loads(err)["error"]["message"]


class TestCompare:
    def _report(self, tmp_path, name, *argv):
        path = tmp_path / f"{name}.json"
        code, _, err = run("impute", *argv, "--out", str(path))
        assert code == 0, err
        return str(path)

    def _rows(self, text):
        return list(csv.DictReader(io.StringIO(text)))

    def test_closed_form_vs_em(self, tmp_path, response_only_csv):
        a = self._report(tmp_path, "cf", "--method", "closed-form", "--input", response_only_csv)
        b = self._report(tmp_path, "em", "--method", "em", "--input", response_only_csv)
        code, out, _ = run("compare", a, b)
        rows = self._rows(out)
        assert code == 0 and {r["method"] for r in rows} == {"closed-form", "em"}
        pts = {}
        for r in rows:
            pts.setdefault(r["cell"], []).append(float(r["point"]))
        assert all(abs(x - y) < 1e-8 for x, y in pts.values())

    def test_nls_vs_constrained(self, tmp_path):
        spec = tmp_path / "c.json"
        spec.write_text('{"lower_bounds": [{"variable": "X1", "row": 11, "value": 0}]}')
        a = self._report(tmp_path, "nls", "--method", "nls", "--input", HALD)
        b = self._report(tmp_path, "con", "--method", "constrained", "--input", HALD, "--constraints", str(spec))
        out_csv = tmp_path / "cmp.csv"
        assert run("compare", a, b, "--out", str(out_csv))[0] == 0
        pts = {}
        for r in self._rows(out_csv.read_text()):
            pts.setdefault(r["cell"], {})[r["method"]] = float(r["point"])
        diff = {k: abs(v["nls"] - v["constrained"]) for k, v in pts.items()}
        for k, dv in diff.items():
            row = int(k.split("@")[1])
            if row < 10:
                assert dv < 1e-3, k
        assert max(diff, key=diff.get) == "X2@11"

    def test_single_report(self, tmp_path):
        a = self._report(tmp_path, "nls", "--method", "nls", "--input", HALD)
        code, _, err = run("compare", a)
        assert code == 2 and "at least two" in err

    def test_mismatched_cells(self, tmp_path, response_only_csv):
        a = self._report(tmp_path, "nls", "--method", "nls", "--input", HALD)
        b = self._report(tmp_path, "cf", "--method", "closed-form", "--input", response_only_csv)
        code, _, err = run("compare", a, b)
        assert code == 2 and "different cells" in err

    def test_labels(self, tmp_path):
        a = self._report(tmp_path, "a", "--method", "nls", "--input", HALD)
        code, out, _ = run("compare", a, a, "--labels", "first,second")
        assert {r["method"] for r in self._rows(out)} == {"first", "second"}


def test_console_entry_and_log_env(tmp_path):
    env = dict(os.environ, REGEM_LOG="INFO")
    proc = subprocess.run(
        [sys.executable, "-m", "regem.cli", "impute", "--method", "bootstrap", "--input", HALD,
         "--seed", "1", "--B", "3"],
        capture_output=True, text=True, env=env, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert "bootstrap: 3 attempted" in proc.stderr or "bootstrap:" in proc.stderr
    assert json.loads(proc.stdout)["schema"] == 1
