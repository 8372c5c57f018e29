"""Command line behavior: outputs, overrides, and exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

import weakiv
from weakiv.cli import REFERENCE_LOSSES, load_csv_dataset, main
from weakiv.dgp import dgp_to_dict
from weakiv.estimators import fuller, optimal_iv, tsls

from conftest import make_cell_dataset, make_iv_dataset


def write_csv(path, data):
    cols = ["y"] + [f"x{i+1}" for i in range(data.dims.d)] + [f"z{i+1}" for i in range(data.dims.k)]
    body = np.column_stack([data.y, data.x, data.z])
    np.savetxt(path, body, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
    return str(path)


def write_experiment_config(path, n=150, iterations=4):
    doc = {
        "dgp": dgp_to_dict(weakiv.benchmark_dgp("weak", n=n, seed=0)),
        "iterations": iterations,
        "estimators": [{"name": "tsls"}, {"name": "rb_tsls", "draws": 5}],
        "master_seed": 3,
    }
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


class TestHelp:
    def test_subprocess_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "weakiv.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        for name in ("simulate", "estimate", "replicate", "concentration"):
            assert name in proc.stdout

    def test_unknown_flag_exits_two(self, tmp_path):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--config", cfg, "--bogus"])
        assert exc.value.code == 2


class TestSimulate:
    def test_json_output(self, tmp_path, capsys):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        assert main(["simulate", "--config", cfg]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["schema_version"] == 1
        assert payload["iterations"] == 4
        assert set(payload["estimators"]) == {"tsls", "rb_tsls"}

    def test_out_directory_and_determinism(self, tmp_path, capsys):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        capsys.readouterr()
        docs = []
        for sub in ("a", "b"):
            doc = json.loads((tmp_path / sub / "result.json").read_text())
            doc.pop("meta")
            docs.append(json.dumps(doc, sort_keys=True))
        assert docs[0] == docs[1]

    def test_csv_export(self, tmp_path, capsys):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        out = tmp_path / "runs"
        assert main(["simulate", "--config", cfg, "--format", "csv", "--out", str(out)]) == 0
        capsys.readouterr()
        assert (out / "losses.csv").exists()
        assert (out / "histograms.csv").exists()

    def test_csv_without_out_rejected(self, tmp_path, capsys):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        assert main(["simulate", "--config", cfg, "--format", "csv"]) == 2
        assert "csv" in capsys.readouterr().err

    def test_overrides(self, tmp_path, capsys):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        assert main(["simulate", "--config", cfg, "--iterations", "2", "--draws", "3", "--seed", "8"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["iterations"] == 2
        assert payload["config"]["master_seed"] == 8
        specs = {e["name"]: e for e in payload["config"]["estimators"]}
        assert specs["rb_tsls"]["draws"] == 3

    def test_workers_agree(self, tmp_path, capsys):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        assert main(["simulate", "--config", cfg, "--workers", "1"]) == 0
        one = json.loads(capsys.readouterr().out)
        assert main(["simulate", "--config", cfg, "--workers", "2"]) == 0
        two = json.loads(capsys.readouterr().out)
        one.pop("meta")
        two.pop("meta")
        assert one == two

    def test_missing_config_exits_two(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2
        capsys.readouterr()

    def test_invalid_json_exits_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        assert main(["simulate", "--config", str(bad)]) == 2
        capsys.readouterr()

    def test_unknown_field_exits_two(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        doc = {"dgp": dgp_to_dict(weakiv.benchmark_dgp("weak", n=100, seed=0)), "warmup": 5}
        cfg.write_text(json.dumps(doc), encoding="utf-8")
        assert main(["simulate", "--config", str(cfg)]) == 2
        capsys.readouterr()


class TestReplicate:
    def test_reduced_run_reports_reference(self, tmp_path, capsys):
        code = main([
            "replicate", "weak", "--iterations", "3", "--draws", "2",
            "--inner-draws", "2", "--format", "json", "--out", str(tmp_path),
        ])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["mode"] == "weak"
        assert payload["reference"] == REFERENCE_LOSSES["weak"]
        assert payload["result"]["iterations"] == 3
        saved = json.loads((tmp_path / "replicate_weak.json").read_text())
        assert saved["reference"] == REFERENCE_LOSSES["weak"]

    def test_table_format(self, capsys):
        code = main(["replicate", "strong", "--iterations", "2", "--draws", "2", "--inner-draws", "2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "ref MSE" in out
        assert "RB optimal IV" in out


class TestEstimate:
    def test_tsls_matches_library(self, tmp_path, capsys):
        data = make_iv_dataset(0)
        path = write_csv(tmp_path / "d.csv", data)
        assert main(["estimate", "--data", path]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["estimator"] == "tsls"
        assert abs(payload["beta"][0] - tsls(data).beta[0]) < 1e-12
        assert np.abs(np.array(payload["pi"]) - tsls(data).pi).max() < 1e-12

    def test_fuller_adjustment_forwarded(self, tmp_path, capsys):
        data = make_iv_dataset(1)
        path = write_csv(tmp_path / "d.csv", data)
        assert main(["estimate", "--data", path, "--estimator", "fuller", "--fuller-c", "3"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["diagnostics"]["c"] == 3.0
        assert abs(payload["beta"][0] - fuller(data, 3.0).beta[0]) < 1e-12

    def test_optimal_iv_on_cell_data(self, tmp_path, capsys):
        data = make_cell_dataset(0, n=400)
        path = write_csv(tmp_path / "d.csv", data)
        assert main(["estimate", "--data", path, "--estimator", "optimal-iv"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert abs(payload["beta"][0] - optimal_iv(data).beta[0]) < 1e-12

    def test_unbiased_needs_scalar_model(self, tmp_path, capsys):
        path = write_csv(tmp_path / "d.csv", make_iv_dataset(0))  # k = 3
        assert main(["estimate", "--data", path, "--estimator", "unbiased"]) == 2
        capsys.readouterr()

    def test_unbiased_on_scalar_data(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        z = rng.choice([1.0, 2.0], size=(200, 1))
        x = 0.9 * z + rng.normal(size=(200, 1))
        data = weakiv.Dataset(y=(x @ np.array([0.5])) + rng.normal(size=200), x=x, z=z)
        path = write_csv(tmp_path / "d.csv", data)
        code = main(["estimate", "--data", path, "--estimator", "unbiased",
                     "--variance-convention", "pi"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["diagnostics"]["variance_convention"] == "pi"
        assert "t" in payload["diagnostics"]

    def test_unknown_column_exits_two(self, tmp_path, capsys):
        path = tmp_path / "d.csv"
        path.write_text("y,x1,w1\n1.0,2.0,3.0\n2.0,1.0,0.5\n", encoding="utf-8")
        assert main(["estimate", "--data", str(path)]) == 2
        assert "w1" in capsys.readouterr().err

    def test_rank_deficient_instruments_exit_four(self, tmp_path, capsys):
        data = make_iv_dataset(2)
        z = data.z.copy()
        z[:, 1] = z[:, 0]
        path = write_csv(tmp_path / "d.csv", weakiv.Dataset(y=data.y, x=data.x, z=z))
        assert main(["estimate", "--data", path]) == 4
        capsys.readouterr()

    def test_missing_file_exits_three(self, tmp_path, capsys):
        assert main(["estimate", "--data", str(tmp_path / "gone.csv")]) == 3
        capsys.readouterr()

    def test_gapped_column_numbering_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("y,x1,z1,z3\n1,2,3,4\n2,1,4,3\n", encoding="utf-8")
        with pytest.raises(weakiv.ConfigError):
            load_csv_dataset(path)


class TestConcentration:
    def test_matches_library_value(self, tmp_path, capsys):
        dgp = weakiv.benchmark_dgp("weak", n=1000, seed=0)
        path = tmp_path / "dgp.json"
        path.write_text(json.dumps(dgp_to_dict(dgp)), encoding="utf-8")
        assert main(["concentration", "--config", str(path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        expected = weakiv.concentration_parameter(dgp.design, dgp.errors, dgp.effective_pi())
        assert payload["concentration"] == pytest.approx(expected[0, 0], rel=1e-12)
        assert payload["mode"] == "weak"

    def test_accepts_nested_experiment_config(self, tmp_path, capsys):
        cfg = write_experiment_config(tmp_path / "cfg.json")
        assert main(["concentration", "--config", cfg]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["concentration"] > 0.0

    def test_table_format(self, tmp_path, capsys):
        dgp = weakiv.benchmark_dgp("strong", n=1000, seed=0)
        path = tmp_path / "dgp.json"
        path.write_text(json.dumps(dgp_to_dict(dgp)), encoding="utf-8")
        assert main(["concentration", "--config", str(path), "--format", "table"]) == 0
        assert "concentration parameter" in capsys.readouterr().out

    def test_missing_config_exits_two(self, tmp_path, capsys):
        assert main(["concentration", "--config", str(tmp_path / "none.json")]) == 2
        capsys.readouterr()
