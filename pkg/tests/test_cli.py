"""End-to-end CLI tests: parsing, dispatch, files, exit codes, determinism."""

import json
from pathlib import Path

import numpy as np
import pytest

from segflow.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_STATISTICAL,
    main,
    run_experiment,
)
from segflow.config import parse_config_dict


def write_cfg(tmp_path: Path, data: dict, name="cfg.json") -> str:
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def fast_assumptions(seed=11):
    return {
        "kind": "assumptions",
        "seed": seed,
        "model": {"name": "linear_delay_ou"},
        "numerics": {"n_pairs": 50, "n_samples": 50},
    }


def fast_slln(seed=12):
    return {
        "kind": "slln",
        "seed": seed,
        "model": {"name": "linear_delay_ou"},
        "numerics": {
            "replicas": 100,
            "t_grid": [2.0, 4.0, 8.0, 16.0, 32.0],
            "stat_n_traj": 16,
            "samples_per_traj": 4,
        },
    }


class TestCommands:
    def test_list(self, capsys):
        assert main(["list"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "linear_delay_ou" in out
        assert "exp_decay" in out

    def test_validate_echoes_full_config(self, tmp_path, capsys):
        path = write_cfg(tmp_path, fast_assumptions())
        assert main(["validate", path]) == EXIT_OK
        echo = json.loads(capsys.readouterr().out)
        assert echo["numerics"]["n_pairs"] == 50
        assert "dt" in echo["numerics"]

    def test_validate_bad_config(self, tmp_path, capsys):
        path = write_cfg(tmp_path, {**fast_assumptions(), "numerics": {"n_pairz": 5}})
        assert main(["validate", path]) == EXIT_CONFIG
        assert "n_pairz" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert main(["validate", "/nonexistent/cfg.json"]) == EXIT_CONFIG

    def test_run_assumptions_writes_report(self, tmp_path, capsys):
        path = write_cfg(tmp_path, fast_assumptions())
        out = tmp_path / "out"
        assert main(["run", path, "--out", str(out)]) == EXIT_OK
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["payload"]["dissipativity"]["passed"] is True
        assert report["payload"]["ellipticity"]["passed"] is True
        assert report["kind"] == "assumptions"

    def test_run_slln_deterministic_digest(self, tmp_path):
        cfg = parse_config_dict(fast_slln())
        r1 = run_experiment(cfg)
        r2 = run_experiment(cfg)
        assert r1.digest == r2.digest

    def test_seed_override_changes_digest(self, tmp_path):
        path = write_cfg(tmp_path, fast_slln())
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["run", path, "--out", str(out1)]) == EXIT_OK
        assert main(["run", path, "--out", str(out2), "--seed", "999"]) == EXIT_OK
        d1 = json.loads((out1 / "report.json").read_text())["payload_digest"]
        d2 = json.loads((out2 / "report.json").read_text())["payload_digest"]
        assert d1 != d2

    def test_slln_emits_csv(self, tmp_path):
        path = write_cfg(tmp_path, fast_slln())
        out = tmp_path / "out"
        assert main(["run", path, "--out", str(out)]) == EXIT_OK
        lines = (out / "slln.csv").read_text(encoding="utf-8").strip().split("\n")
        assert lines[0] == "t,mse,envelope"
        assert len(lines) == 6


class TestFailurePaths:
    def test_lil_with_zero_signal_observable_exits_statistical(self, tmp_path, capsys):
        # the zero observable has no variance: the discrete variance constant
        # comes out non-positive and the run must fail in a structured way
        cfg = {
            "kind": "lil",
            "seed": 13,
            "model": {"name": "linear_delay_ou"},
            "observable": {"name": "zero"},
            "numerics": {
                "n_max": 256,
                "stat_n_traj": 8,
                "samples_per_traj": 2,
                "rate_n_traj": 32,
                "rate_t_grid": [0.5, 1.0, 1.5, 2.0],
                "inner_replicas": 8,
                "outer_replicas": 4,
                "max_atoms": 8,
            },
        }
        path = write_cfg(tmp_path, cfg)
        out = tmp_path / "out"
        code = main(["run", path, "--out", str(out)])
        assert code == EXIT_STATISTICAL
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["failures"]
        # structured failure record still contains the variance payload
        assert "variance" in report["payload"] or "error" in report["payload"]

    def test_degenerate_noise_fails_assumptions(self, tmp_path):
        # the decay model declares no inverse diffusion bound: the ellipticity
        # check fails fast and the run exits with the statistical-failure code
        cfg = {
            "kind": "assumptions",
            "seed": 14,
            "model": {"name": "deterministic_decay"},
            "numerics": {"n_pairs": 20, "n_samples": 20},
        }
        path = write_cfg(tmp_path, cfg)
        out = tmp_path / "o"
        assert main(["run", path, "--out", str(out)]) == EXIT_STATISTICAL
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["payload"]["dissipativity"]["passed"] is True
        assert "error" in report["payload"]["ellipticity"]


class TestThreadsEnv:
    def test_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SEGFLOW_THREADS", "3")
        path = write_cfg(tmp_path, fast_assumptions())
        assert main(["run", path, "--out", str(tmp_path / "o")]) == EXIT_OK

    def test_env_invalid(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SEGFLOW_THREADS", "many")
        path = write_cfg(tmp_path, fast_assumptions())
        assert main(["run", path, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestRegistryConstruction:
    def test_ok_constants(self):
        cfg = parse_config_dict(
            {"kind": "assumptions", "seed": 1,
             "model": {"name": "linear_delay_ou", "params": {"a": 2.0, "b": 0.1, "r0": 0.5}}}
        )
        model = cfg.build_model()
        assert model.lambda1 == pytest.approx(3.9)

    def test_side_condition_violation_is_config_error(self, tmp_path, capsys):
        path = write_cfg(
            tmp_path,
            {"kind": "assumptions", "seed": 1,
             "model": {"name": "linear_delay_ou", "params": {"a": 0.2, "b": 0.5}}},
        )
        assert main(["validate", path]) == EXIT_CONFIG
