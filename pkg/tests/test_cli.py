"""End-to-end tests of the command-line interface."""

from __future__ import annotations

import numpy as np
import pandas as pd
from click.testing import CliRunner

from pats.cli import main
from tests.test_analysis import write_config, write_single_stage_csv


def run_cli(args, env=None):
    return CliRunner().invoke(main, args, env=env, catch_exceptions=False)


class TestSimulate:
    def test_byte_deterministic_outputs(self, tmp_path):
        env = {"PATS_WORKERS": "1"}
        args = ["simulate", "--scenario", "s1", "--n", "150", "--reps", "3",
                "--estimators", "ce_dwols", "--seed", "9"]
        r1 = run_cli(args + ["--out", str(tmp_path / "a")], env=env)
        r2 = run_cli(args + ["--out", str(tmp_path / "b")], env=env)
        assert r1.exit_code == 0 and r2.exit_code == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        assert "rel.bias%" in r1.output

    def test_unknown_scenario_is_usage_error(self, tmp_path):
        r = run_cli(["simulate", "--scenario", "s9", "--n", "100", "--reps", "2",
                     "--out", str(tmp_path / "x")])
        assert r.exit_code == 2
        assert "s9" in r.output

    def test_unknown_estimator_is_usage_error(self, tmp_path):
        r = run_cli(["simulate", "--scenario", "s1", "--n", "100", "--reps", "2",
                     "--estimators", "bogus", "--out", str(tmp_path / "x")])
        assert r.exit_code == 2

    def test_report_csv_parses(self, tmp_path):
        from pats.simulation import SimReport

        out = tmp_path / "rep"
        r = run_cli(["simulate", "--scenario", "e1", "--n", "200", "--reps", "2",
                     "--estimators", "ce_dwols,integrate_dwols", "--seed", "1",
                     "--out", str(out)], env={"PATS_WORKERS": "1"})
        assert r.exit_code == 0
        report = SimReport.from_csv((tmp_path / "rep.csv").read_text())
        assert report.scenario == "e1"
        assert {e.estimator for e in report.estimators} == {"ce_dwols", "integrate_dwols"}


class TestAnalyze:
    def test_recovers_truth_and_covers(self, tmp_path):
        csv_path = tmp_path / "d.csv"
        write_single_stage_csv(csv_path, 20_000, 11)
        cfg = write_config(tmp_path / "c.yaml", csv_path,
                           bootstrap="bootstrap:\n  b1: 50\n")
        out = tmp_path / "est.csv"
        r = run_cli(["analyze", cfg, "--out", str(out)])
        assert r.exit_code == 0
        frame = pd.read_csv(out)
        np.testing.assert_allclose(frame["estimate"], [1.25, -1.0], atol=0.06)
        assert np.all(frame["ci_lower"] <= [1.25, -1.0])
        assert np.all(frame["ci_upper"] >= [1.25, -1.0])

    def test_missing_column_exits_2(self, tmp_path):
        csv_path = tmp_path / "d.csv"
        pd.DataFrame({"x1": [0, 1], "a": [0, 1], "y": [0.0, 1.0]}).to_csv(
            csv_path, index=False
        )
        cfg = write_config(tmp_path / "c.yaml", csv_path)
        r = run_cli(["analyze", cfg, "--out", str(tmp_path / "o.csv")])
        assert r.exit_code == 2
        assert "x2" in r.output

    def test_bad_schema_exits_2(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("input: d.csv\n")
        r = run_cli(["analyze", str(p), "--out", str(tmp_path / "o.csv")])
        assert r.exit_code == 2


class TestBootstrap:
    def test_adaptive_mode_reports_tuning(self, tmp_path):
        from pats.simulation import generate

        ds = generate("e1", 250, seed=33)
        frame = pd.DataFrame(
            {
                "x11": ds.stages[0].covariates["x11"],
                "x12": ds.stages[0].covariates["x12"],
                "a1": ds.stages[0].treatment,
                "x21": ds.stages[1].covariates["x21"],
                "x22": ds.stages[1].covariates["x22"],
                "a2": ds.stages[1].treatment,
                "y": ds.outcome,
            }
        )
        csv_path = tmp_path / "two.csv"
        frame.to_csv(csv_path, index=False)
        cfg = tmp_path / "c.yaml"
        cfg.write_text(f"""\
input: "{csv_path}"
outcome: "y"
estimator: "ce_dwols"
output_format: "table"
stages:
  - treatment: "a1"
    covariates: ["x11", "x12"]
    treatment_model: ["1", "x11", "x12"]
    treatment_free_model: ["1", "x11", "x12"]
    blip_model: ["1", "x11", "x12"]
    tailoring_model: ["1", "x11"]
    tailoring_columns: ["x11"]
  - treatment: "a2"
    covariates: ["x21", "x22"]
    treatment_model: ["1", "x11", "x12", "a1", "x21", "x22"]
    treatment_free_model: ["1", "x11", "x12", "a1", "x21", "x22"]
    blip_model: ["1", "x21", "x22"]
    tailoring_model: ["1", "x21"]
    tailoring_columns: ["x21"]
bootstrap:
  b1: 60
  b2: 40
  mode: plain
""")
        out = tmp_path / "est.txt"
        r = run_cli(["bootstrap", str(cfg), "--mode", "adaptive_mn", "--out", str(out)])
        assert r.exit_code == 0
        text = out.read_text()
        assert "p_hat=" in text and "m_hat=" in text

    def test_plain_mode_omits_tuning_fields(self, tmp_path):
        csv_path = tmp_path / "d.csv"
        write_single_stage_csv(csv_path, 400, 12)
        cfg = write_config(tmp_path / "c.yaml", csv_path,
                           bootstrap="bootstrap:\n  b1: 30\n",
                           extra="output_format: table\n")
        out = tmp_path / "est.txt"
        r = run_cli(["bootstrap", cfg, "--out", str(out)])
        assert r.exit_code == 0
        assert "p_hat" not in out.read_text()
