"""Command-line front end."""

import csv
import json
import time

import numpy as np
import pytest

from polyfutures.cli import main
from polyfutures.models import REFERENCE_COORDS, pd_futures_price, pd_spot, reference_params


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def tree_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def small_panel(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    cfg = write_json(out / "sim.json", {"n_obs": 150, "tenors_months": [1, 2, 3, 4], "seed": 3})
    assert main(["simulate", "--config", cfg, "--out", str(out / "run")]) == 0
    return out / "run" / "panel.csv"


class TestSimulate:
    def test_default_design(self, tmp_path, capsys):
        assert main(["simulate", "--out", str(tmp_path), "--seed", "4"]) == 0
        rows = read_rows(tmp_path / "panel.csv")
        assert len(rows) == 1001 and len(rows[1]) == 13
        assert rows[0][0] == "tenor_months:1"
        assert {p.name for p in tmp_path.iterdir()} == {"config.json", "panel.csv", "panel.json", "panel_states.csv"}
        assert "n=1000 m=13" in capsys.readouterr().out

    def test_invalid_bound(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"n_obs": 0})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "n_obs" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "cfg, needle",
        [
            ({"unknown": 1}, "unknown"),
            ({"params": {"kappa": -1.0}}, "kappa"),
            ({"model": "XY"}, "model"),
        ],
    )
    def test_config_errors(self, tmp_path, capsys, cfg, needle):
        path = write_json(tmp_path / "c.json", cfg)
        assert main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == 2
        assert needle in capsys.readouterr().err

    def test_malformed_json(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{\n  'n_obs': 3\n}")
        assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_threads_bound(self, tmp_path):
        assert main(["simulate", "--threads", "0", "--out", str(tmp_path)]) == 2


class TestFit:
    def test_case1_outputs(self, tmp_path, small_panel):
        assert main(["fit", "--panel", str(small_panel), "--out", str(tmp_path)]) == 0
        rmse = read_rows(tmp_path / "rmse.csv")
        assert rmse[0] == ["contract", "tenor_months", "rmse"]
        assert len(rmse) == 1 + 4 + 1 and rmse[-1][0] == "mean"
        recovery = read_rows(tmp_path / "recovery.csv")
        assert len(recovery) == 1 + 10 + 4 + 6
        assert all(row[3] == "0" for row in recovery[1:])
        assert len(read_rows(tmp_path / "filtered_states.csv")) == 151
        assert "best start 0" in (tmp_path / "run_log.txt").read_text()

    def test_thirteen_contract_rmse_layout(self, tmp_path):
        sim = tmp_path / "sim"
        assert main(["simulate", "--out", str(sim), "--seed", "2"]) == 0
        assert main(["fit", "--panel", str(sim / "panel.csv"), "--out", str(tmp_path / "fit")]) == 0
        assert len(read_rows(tmp_path / "fit" / "rmse.csv")) == 1 + 13 + 1

    def test_case4_ukf_twenty_contract_recovery(self, tmp_path):
        sim = tmp_path / "sim"
        cfg = write_json(tmp_path / "s.json", {"n_obs": 100, "tenors_months": list(range(1, 21))})
        assert main(["simulate", "--config", cfg, "--out", str(sim)]) == 0
        fit_cfg = write_json(tmp_path / "f.json", {"max_evals": 40, "n_starts": 2})
        args = ["fit", "--config", fit_cfg, "--panel", str(sim / "panel.csv"), "--regime", "case4", "--filter", "UKF"]
        assert main(args + ["--out", str(tmp_path / "fit")]) == 0
        rows = read_rows(tmp_path / "fit" / "recovery.csv")
        assert len(rows) - 1 == 10 + 20 + 6
        assert all(row[5] == "1" for row in rows[1:])

    def test_convention_mismatch(self, tmp_path, small_panel, capsys):
        cfg = write_json(tmp_path / "f.json", {"model": "SS", "filter": "KF"})
        assert main(["fit", "--config", cfg, "--panel", str(small_panel), "--out", str(tmp_path / "o")]) == 2
        assert "log_price" in capsys.readouterr().err

    def test_all_starts_failed(self, tmp_path, small_panel, capsys):
        cfg = write_json(
            tmp_path / "f.json",
            {"regime": "case3", "max_evals": 20, "n_starts": 2, "bounds": {"mu_xi": [100, 200]}},
        )
        assert main(["fit", "--config", cfg, "--panel", str(small_panel), "--out", str(tmp_path / "o")]) == 3
        assert "estimation failed" in capsys.readouterr().err

    def test_missing_panel(self, tmp_path, capsys):
        assert main(["fit", "--out", str(tmp_path)]) == 2
        assert main(["fit", "--panel", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2

    def test_kalman_filter_rejected_for_pd(self, tmp_path, small_panel):
        assert main(["fit", "--panel", str(small_panel), "--filter", "KF", "--out", str(tmp_path)]) == 2


class TestExpmBench:
    def test_report(self, tmp_path, capsys):
        assert main(["expm-bench", "--trials", "3", "--dim", "4", "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "expm_bench.csv")
        assert rows[0] == ["method", "mean_phi", "mean_psi", "failures", "trials"]
        assert len(rows) == 1 + 7
        assert not (tmp_path / "timings.csv").exists()
        assert "Eigen" in capsys.readouterr().out

    def test_smoke_is_fast(self, tmp_path):
        start = time.perf_counter()
        assert main(["expm-bench", "--trials", "1", "--dim", "2", "--out", str(tmp_path)]) == 0
        assert time.perf_counter() - start < 1.0

    def test_timings_opt_in(self, tmp_path):
        assert main(["expm-bench", "--trials", "1", "--dim", "3", "--timings", "--out", str(tmp_path)]) == 0
        assert len(read_rows(tmp_path / "timings.csv")) == 8

    @pytest.mark.parametrize("flags", [["--dim", "1"], ["--trials", "0"]])
    def test_bounds(self, tmp_path, flags):
        assert main(["expm-bench", *flags, "--out", str(tmp_path)]) == 2


class TestPrice:
    def test_constant_polynomial(self, tmp_path):
        args = ["price", "--coords", "1", "0", "0", "0", "0", "0", "--state", "0.7", "-2"]
        assert main(args + ["--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "term_structure.csv")
        assert rows[0] == ["tenor_months", "tau_years", "price"] and len(rows) == 21
        np.testing.assert_allclose([float(r[2]) for r in rows[1:]], 1.0, atol=1e-12)

    def test_zero_tenor_is_spot(self, tmp_path):
        assert main(["price", "--state", "0.1", "3", "--tenors", "0", "6", "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "term_structure.csv")
        assert float(rows[1][2]) == pytest.approx(pd_spot([0.1, 3.0], REFERENCE_COORDS), rel=1e-13)
        expected = pd_futures_price([0.1, 3.0], reference_params(1), REFERENCE_COORDS, 0.5)
        assert float(rows[2][2]) == pytest.approx(expected, rel=1e-13)

    def test_ss_model(self, tmp_path):
        assert main(["price", "--model", "SS", "--state", "0", "0", "--tenors", "0", "--out", str(tmp_path)]) == 0
        assert float(read_rows(tmp_path / "term_structure.csv")[1][2]) == 1.0

    def test_params_file(self, tmp_path):
        params = write_json(tmp_path / "p.json", {"kappa": 2.0, "lambda_chi": 0.0})
        assert main(["price", "--params", params, "--out", str(tmp_path / "o")]) == 0
        echoed = json.loads((tmp_path / "o" / "config.json").read_text())
        assert echoed["params"]["kappa"] == 2.0

    def test_invalid_params(self, tmp_path, capsys):
        params = write_json(tmp_path / "p.json", {"rho": 1.5})
        assert main(["price", "--params", params, "--out", str(tmp_path / "o")]) == 2
        assert "rho" in capsys.readouterr().err


class TestReproducibility:
    @pytest.mark.parametrize(
        "argv",
        [
            ["simulate", "--seed", "8"],
            ["expm-bench", "--trials", "2", "--dim", "3"],
            ["price", "--state", "0.2", "2.5"],
        ],
    )
    def test_rerun_from_echoed_config(self, tmp_path, argv):
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(argv + ["--out", str(first)]) == 0
        assert main([argv[0], "--config", str(first / "config.json"), "--out", str(second)]) == 0
        assert tree_bytes(first) == tree_bytes(second)

    def test_fit_rerun(self, tmp_path, small_panel):
        first, second = tmp_path / "a", tmp_path / "b"
        args = ["fit", "--panel", str(small_panel), "--regime", "case2"]
        cfg = write_json(tmp_path / "f.json", {"max_evals": 60, "n_starts": 2})
        assert main(args + ["--config", cfg, "--out", str(first)]) == 0
        assert main(["fit", "--config", str(first / "config.json"), "--out", str(second)]) == 0
        assert tree_bytes(first) == tree_bytes(second)
