import json

import numpy as np
import pytest

from sdelab.lab import (ExperimentConfig, csv_hashes, default_config, run,
                        validate, write_report)
from sdelab.lab.cli import main as cli_main


def _quick_flow_config(field_key="frozen", **overrides):
    cfg = default_config("flow-cauchy", seed=777)
    cfg.data["field"] = {"key": field_key, "params": {}}
    cfg.data.update({"n_particles": 200, "n_paths": 8, "n_steps": 64,
                     "ladder": [4, 8]})
    cfg.data.update(overrides)
    return cfg


class TestConfig:
    def test_defaults_validate_clean(self):
        for exp in ("osgood-certify", "mollify-ladder", "flow-cauchy",
                    "density-bound", "fpe-duality"):
            assert validate(default_config(exp)) == []

    def test_unknown_experiment(self):
        findings = validate(ExperimentConfig({"experiment": "nope"}))
        assert any("experiment" in f for f in findings)

    def test_short_ladder_rejected(self):
        cfg = _quick_flow_config()
        cfg.data["ladder"] = [4]
        assert any("ladder" in f for f in validate(cfg))

    def test_unknown_field_and_modulus(self):
        cfg = _quick_flow_config()
        cfg.data["field"]["key"] = "bogus"
        cfg.data["modulus"] = "bogus"
        findings = validate(cfg)
        assert any("field.key" in f for f in findings)
        assert any("modulus" in f for f in findings)

    def test_bad_measure(self):
        cfg = _quick_flow_config()
        cfg.data["measure"] = {"kind": "weighted", "q": 0.5}
        assert any("measure.q" in f for f in validate(cfg))

    def test_explicit_cfl_violation_reports_admissible_dt(self):
        cfg = default_config("fpe-duality")
        cfg.data["scheme"] = "explicit"
        cfg.data["ou"]["dt"] = 1.0
        findings = validate(cfg)
        assert any("required dt" in f for f in findings)

    def test_hash_ignores_output_dir(self):
        a = default_config("flow-cauchy")
        b = default_config("flow-cauchy")
        b.data["output_dir"] = "/tmp/elsewhere"
        assert a.hash() == b.hash()

    def test_hash_sensitive_to_seed(self):
        a = default_config("flow-cauchy", seed=1)
        b = default_config("flow-cauchy", seed=2)
        assert a.hash() != b.hash()

    def test_file_roundtrip(self, tmp_path):
        cfg = default_config("density-bound", seed=5)
        path = tmp_path / "cfg.json"
        cfg.to_file(path)
        again = ExperimentConfig.from_file(path)
        assert again.hash() == cfg.hash()

    def test_run_rejects_invalid(self):
        cfg = _quick_flow_config()
        cfg.data["ladder"] = []
        with pytest.raises(ValueError, match="ladder"):
            run(cfg)


class TestExperiments:
    def test_flow_cauchy_frozen_dynamics_all_zero(self):
        rep = run(_quick_flow_config("frozen"))
        assert rep.passed
        stats = [row[3] for row in rep.tables["cauchy"]["rows"]]
        assert all(s == 0.0 for s in stats)

    def test_flow_summary_table_columns(self):
        rep = run(_quick_flow_config("frozen"))
        assert rep.tables["flow_summary"]["header"] == \
            ["n_level", "delta", "psi_value", "stderr"]

    def test_report_embeds_config_hash(self):
        cfg = _quick_flow_config("frozen")
        rep = run(cfg)
        assert rep.config_hash == cfg.hash()
        assert rep.wallclock_s > 0


class TestReporting:
    def test_write_and_hash_roundtrip(self, tmp_path):
        cfg = _quick_flow_config("frozen")
        rep = run(cfg)
        written = write_report(rep, tmp_path / "out", make_plots=True)
        assert (tmp_path / "out" / "report.json").exists()
        assert (tmp_path / "out" / "cauchy.csv").exists()
        assert (tmp_path / "out" / "flow_cauchy.png").exists()
        summary = json.loads((tmp_path / "out" / "report.json").read_text())
        assert summary["config_hash"] == cfg.hash()
        assert summary["passed"] is True

    def test_replay_identical_hashes_across_workers(self, tmp_path):
        hashes = []
        for workers in (1, 4):
            cfg = _quick_flow_config("vseries")
            cfg.data["field"]["params"] = {"sigma_scale": 0.5}
            cfg.data["workers"] = workers
            rep = run(cfg)
            out = tmp_path / f"w{workers}"
            write_report(rep, out, make_plots=False)
            hashes.append(csv_hashes(out))
        assert hashes[0] == hashes[1]


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        default_config("mollify-ladder").to_file(path)
        assert cli_main(["validate", str(path)]) == 0
        assert "config ok" in capsys.readouterr().out

    def test_validate_bad_config_exit_2(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        cfg = default_config("flow-cauchy")
        cfg.data["ladder"] = [4]
        cfg.to_file(path)
        assert cli_main(["validate", str(path)]) == 2
        assert "ladder" in capsys.readouterr().err

    def test_validate_unreadable_exit_2(self, tmp_path):
        assert cli_main(["validate", str(tmp_path / "missing.json")]) == 2

    def test_run_config_writes_report(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        _quick_flow_config("frozen").to_file(path)
        code = cli_main(["run", str(path), "--out", str(tmp_path / "out"),
                         "--no-plots"])
        assert code == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "report:" in out
        reports = list((tmp_path / "out").glob("*/report.json"))
        assert len(reports) == 1

    def test_quick_subcommand(self, tmp_path, capsys):
        code = cli_main(["mollify", "--quick", "--out", str(tmp_path),
                         "--no-plots"])
        assert code == 0
        assert "[PASS]" in capsys.readouterr().out
