import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cmdpgrad import io as cio
from cmdpgrad.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_POWER, EXIT_VALIDATION, main


def run(tmp_path, *argv):
    return main([argv[0], "--out-dir", str(tmp_path), *argv[1:]])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestEvalAndLp:
    def test_eval_writes_gradient(self, tmp_path, capsys):
        assert run(tmp_path, "eval") == EXIT_OK
        rows = read_csv(tmp_path / "eval.csv")
        g = [float(r["value"]) for r in rows if r["kind"] == "grad_alpha"]
        np.testing.assert_allclose(g, [45.05, -55.07, 187.58, -159.91], atol=0.01)
        meta = json.loads((tmp_path / "eval.meta.json").read_text())
        assert meta["command"] == "eval" and len(meta["config_hash"]) == 16
        assert "C =" in capsys.readouterr().out

    def test_eval_custom_theta(self, tmp_path):
        assert run(tmp_path, "eval", "--theta", "[[0.3,0.3,0.4],[0.5,0.25,0.25]]") == EXIT_OK

    def test_eval_boundary_theta(self, tmp_path):
        # angle gradients are undefined for pure policies
        assert run(tmp_path, "eval", "--theta", "[[1,0,0],[0,1,0]]") == EXIT_VALIDATION

    def test_eval_bad_theta(self, tmp_path):
        assert run(tmp_path, "eval", "--theta", "[[0.5,0.6,0],[1,0,0]]") == EXIT_VALIDATION

    @pytest.mark.parametrize("model,value", [("tracking_a", -111.80), ("tracking_b", -44.52)])
    def test_lp(self, tmp_path, model, value):
        assert run(tmp_path, "lp", "--model", model) == EXIT_OK
        rows = read_csv(tmp_path / "lp.csv")
        v = next(float(r["value"]) for r in rows if r["kind"] == "value")
        assert v == pytest.approx(value, abs=0.01)

    def test_lp_infeasible(self, tmp_path):
        d = json.loads(open(cio.bundled_path("tracking_a")).read())
        d["constraints"] = [[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]]
        d["bounds"] = [-1.0]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(d))
        assert run(tmp_path, "lp", "--model", str(path)) == EXIT_NUMERICAL

    def test_missing_model(self, tmp_path):
        assert run(tmp_path, "lp", "--model", str(tmp_path / "nope.json")) == EXIT_VALIDATION


class TestStatisticalCommands:
    def test_grad_small(self, tmp_path):
        with pytest.warns(UserWarning):
            code = run(tmp_path, "grad", "--batch-size", "50", "--replications", "5", "--coords", "alpha")
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "grad.csv")
        assert len(rows) == 4 and {r["coords"] for r in rows} == {"alpha"}

    def test_grad_reproducible(self, tmp_path):
        args = ("grad", "--batch-size", "30", "--replications", "30", "--coords", "psi")
        run(tmp_path / "a", *args)
        run(tmp_path / "b", *args)
        assert (tmp_path / "a" / "grad.csv").read_text() == (tmp_path / "b" / "grad.csv").read_text()

    def test_strict_power_warning(self, tmp_path):
        with pytest.warns(UserWarning):
            code = run(tmp_path, "grad", "--strict", "--batch-size", "20", "--replications", "3")
        assert code == EXIT_POWER

    def test_config_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"replications": 0}))
        assert run(tmp_path, "grad", "--config", str(cfg)) == EXIT_VALIDATION

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert run(tmp_path, "lp", "--config", str(cfg)) == EXIT_VALIDATION

    def test_compare_sf_small(self, tmp_path):
        code = run(tmp_path, "compare-sf", "--batch-size", "100", "--replications", "10", "--sf-batches", "50")
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "compare_sf.csv")
        assert all(float(r["variance_ratio"]) > 1 for r in rows)

    def test_bias_small(self, tmp_path):
        with pytest.warns(UserWarning):
            code = run(tmp_path, "bias", "--batch-sizes", "5,10", "--replications", "4")
        assert code == EXIT_OK
        meta = json.loads((tmp_path / "bias.meta.json").read_text())
        assert "slope" in meta

    def test_track_short(self, tmp_path):
        assert run(tmp_path, "track", "--n-batches", "30", "--backend", "python") == EXIT_OK
        rows = read_csv(tmp_path / "track.csv")
        assert len(rows) == 30
        assert "lambda2" in rows[0]


class TestWireless:
    def test_small_model(self, tmp_path):
        d = json.loads(open(cio.bundled_path("wireless")).read())
        d["capacity"] = 8
        path = tmp_path / "tx.json"
        path.write_text(json.dumps(d))
        assert run(tmp_path, "wireless", "--model", str(path)) == EXIT_OK
        meta = json.loads((tmp_path / "wireless.meta.json").read_text())
        assert meta["delay"] == pytest.approx(0.3, abs=1e-6)

    def test_unstable_model(self, tmp_path):
        d = json.loads(open(cio.bundled_path("wireless")).read())
        d["bound"] = 0.59
        path = tmp_path / "tx.json"
        path.write_text(json.dumps(d))
        assert run(tmp_path, "wireless", "--model", str(path)) == EXIT_VALIDATION


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cmdpgrad", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "cmdpgrad" in out.stdout
