"""Command-line interface tests: exit codes, artifact plumbing, and the
training/evaluation workflow on small inputs."""

import csv
import json

import numpy as np
import pytest

from hemsim.cli import build_parser, main
from hemsim.estimators import LinearZoneModel
from hemsim.harness import (
    TRAINING_CSV_COLUMNS,
    DataSource,
    ScenarioConfig,
)
from hemsim.plant import load_disturbances_csv


def run_cli(*argv) -> int:
    return main(list(argv))


class TestExitCodes:
    def test_no_subcommand_is_usage_error(self, capsys):
        assert run_cli() == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, capsys):
        assert run_cli("gen-data", "--bogus") == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_file_is_runtime_error(self, capsys):
        assert run_cli("train", "--data", "/nonexistent.csv",
                       "--model", "linear", "--out", "/tmp/x.json") == 2
        assert "error" in capsys.readouterr().err

    def test_help_available_everywhere(self, capsys):
        parser = build_parser()
        for cmd in ("gen-data", "simulate", "train", "evaluate", "matrix",
                    "plot-data"):
            with pytest.raises(SystemExit) as exc:
                parser.parse_args([cmd, "--help"])
            assert exc.value.code == 0
            assert "--" in capsys.readouterr().out


class TestGenData:
    def test_writes_loadable_csv(self, tmp_path, capsys):
        out = tmp_path / "data.csv"
        assert run_cli("gen-data", "--seed", "4", "--days", "2",
                       "--out", str(out)) == 0
        series = load_disturbances_csv(out)
        assert len(series) == 96

    def test_deterministic_per_seed(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run_cli("gen-data", "--seed", "4", "--days", "2", "--out", str(a))
        run_cli("gen-data", "--seed", "4", "--days", "2", "--out", str(b))
        assert a.read_text() == b.read_text()


def write_planted_training_csv(path, n=200, seed=0):
    """Training CSV whose targets follow an exact linear model per zone."""
    rng = np.random.default_rng(seed)
    theta = 10 + 5 * rng.normal(size=n + 2)
    p_dem = 250 + 40 * rng.random(n)
    tod = (np.arange(n) * 0.5) % 24.0
    doy = np.arange(n) // 48 + 1
    models = [LinearZoneModel.from_coefficients(rng.normal(0, 1e-3, 9))
              for _ in range(9)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_CSV_COLUMNS)
        for k in range(n):
            row = np.array([theta[k + 2], theta[k + 1], theta[k],
                            p_dem[k], tod[k], doy[k]])
            eps = [m.predict(row.reshape(1, -1))[0] for m in models]
            writer.writerow([k, f"{tod[k]:.10g}", int(doy[k]),
                             f"{theta[k + 2]:.12g}", f"{theta[k + 1]:.12g}",
                             f"{theta[k]:.12g}", f"{p_dem[k]:.12g}"]
                            + [f"{v:.15g}" for v in eps])


class TestTrain:
    def test_linear_recovers_planted_model(self, tmp_path, capsys):
        data = tmp_path / "training.csv"
        write_planted_training_csv(data)
        out = tmp_path / "bundle.json"
        assert run_cli("train", "--data", str(data), "--model", "linear",
                       "--out", str(out)) == 0
        printed = capsys.readouterr().out
        test_mae = float(printed.split("test MAE")[1].split("K")[0])
        assert test_mae <= 1e-8
        assert out.exists()

    def test_gbt_trains_and_saves(self, tmp_path, capsys):
        data = tmp_path / "training.csv"
        write_planted_training_csv(data, n=60)
        out = tmp_path / "bundle.json"
        assert run_cli("train", "--data", str(data), "--model", "gbt",
                       "--out", str(out), "--trees", "5") == 0
        payload = json.loads(out.read_text())
        assert payload["kind"] == "gbt"


@pytest.fixture(scope="module")
def simulated_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = out / "scenario.yaml"
    ScenarioConfig(name="cli-degenerate", duration_days=2,
                   data_source=DataSource(seed=8)).save(config)
    code = main(["simulate", "--config", str(config), "--out", str(out),
                 "--log-solver"])
    return code, out


class TestSimulate:
    def test_degenerate_run_succeeds(self, simulated_run):
        code, out = simulated_run
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["weighted_mae"] <= 1e-6

    def test_solver_log_lines(self, simulated_run):
        _, out = simulated_run
        lines = (out / "solver_log.jsonl").read_text().splitlines()
        assert len(lines) == 96
        entry = json.loads(lines[0])
        assert entry["aggregator"]["status"] in ("SOLVED", "MAX_ITER")

    def test_evaluate_roundtrip(self, simulated_run, tmp_path, capsys):
        _, out = simulated_run
        metrics_path = tmp_path / "metrics.json"
        assert run_cli("evaluate", "--records", str(out / "residuals.csv"),
                       "--out", str(metrics_path)) == 0
        recomputed = json.loads(metrics_path.read_text())
        original = json.loads((out / "metrics.json").read_text())
        assert recomputed["weighted_mae"] == pytest.approx(
            original["weighted_mae"], rel=1e-9, abs=1e-15)

    def test_plot_data_long_format(self, simulated_run, tmp_path):
        _, out = simulated_run
        series_csv = tmp_path / "series.csv"
        assert run_cli("plot-data", "--records", str(out / "trajectory.csv"),
                       "--series", "theta_b,E", "--out", str(series_csv)) == 0
        rows = series_csv.read_text().splitlines()
        assert rows[0] == "step,series,value"
        assert len(rows) == 1 + 2 * 96

    def test_plot_data_residual_alias(self, simulated_run, tmp_path):
        _, out = simulated_run
        series_csv = tmp_path / "series.csv"
        assert run_cli("plot-data", "--records", str(out / "residuals.csv"),
                       "--series", "residual_z1", "--out",
                       str(series_csv)) == 0
        assert sum(1 for _ in open(series_csv)) == 1 + 96

    def test_unknown_series_is_runtime_error(self, simulated_run, tmp_path,
                                             capsys):
        _, out = simulated_run
        assert run_cli("plot-data", "--records", str(out / "trajectory.csv"),
                       "--series", "nope", "--out",
                       str(tmp_path / "x.csv")) == 2
        assert "unknown series" in capsys.readouterr().err
