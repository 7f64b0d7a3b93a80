import json
from pathlib import Path

import pytest

from hkq import cli
from hkq.config import ConfigError, ExperimentConfig, derive_seed

SMALL = Path(__file__).parent / "data" / "small_config.json"


def run(*args):
    return cli.main([str(a) for a in args])


def checksums(out):
    return json.loads((Path(out) / "manifest.json").read_text())["files"]


class TestConfig:
    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig.from_dict({})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_dict({"seed": 1, "noise": {"paths": 5}})

    def test_derived_seeds_are_stable_and_distinct(self):
        assert derive_seed(1, "noise-check") == derive_seed(1, "noise-check")
        assert derive_seed(1, "noise-check") != derive_seed(1, "dynamics")
        assert derive_seed(1, "noise-check", 0) != derive_seed(1, "noise-check", 1)
        assert 0 <= derive_seed(2**64 - 1, "pinney") < 2**64

    def test_digest_ignores_output_location_and_threads(self):
        a = ExperimentConfig.from_dict({"seed": 3}, out="x", threads=1)
        b = ExperimentConfig.from_dict({"seed": 3}, out="y", threads=8)
        c = ExperimentConfig.from_dict({"seed": 4})
        assert a.digest() == b.digest() != c.digest()


class TestExitCodes:
    def test_missing_seed(self, capsys):
        assert run("pinney", "--dry-run") == 2
        assert "seed" in capsys.readouterr().err

    def test_bad_arguments(self):
        assert run("nonsense") == 2
        assert run("pinney", "--seed", "1", "--threads", "0") == 2

    def test_unreadable_config(self, tmp_path):
        assert run("pinney", "--config", tmp_path / "missing.json") == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run("pinney", "--config", bad) == 2

    def test_invalid_profile(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "profile": {"kind": "tabulated", "t": [0, 1, 0.5],
                                                          "omega2": [1, 1, 1]}}))
        assert run("pinney", "--config", cfg, "--out", tmp_path / "o") == 2

    def test_solver_failure_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "profile": {"kind": "modulated", "omega0": 1.0,
                                                          "eps": 1.5, "gamma": 1.3}}))
        assert run("pinney", "--config", cfg, "--out", tmp_path / "o") == 1
        assert "SolverError" in capsys.readouterr().err

    def test_passing_stage(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert run("pinney", "--seed", 5, "--out", out) == 0
        verdict = json.loads((out / "pinney" / "verdict.json").read_text())
        assert verdict["passed"] and verdict["seed"] == derive_seed(5, "pinney")
        assert "PASS" in capsys.readouterr().out
        assert set(checksums(out)) >= {"pinney/verdict.json"}

    def test_gate_failure_exit_code(self, tmp_path):
        cfg = tmp_path / "c.json"
        doc = json.loads(SMALL.read_text())
        doc["quantize"]["spectrum"]["n"] = 64
        cfg.write_text(json.dumps(doc))
        out = tmp_path / "o"
        assert run("quantize", "--config", cfg, "--out", out) == 1
        assert not json.loads((out / "quantize" / "verdict.json").read_text())["passed"]
        assert json.loads((out / "manifest.json").read_text())["verdicts"] == {"quantize": False}


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    assert run("all", "--config", SMALL, "--out", out, "--dry-run") == 0
    assert not out.exists()
    text = capsys.readouterr().out
    assert "stage quantize" in text and "seed 7" in text


def test_seed_flag_overrides_config(tmp_path, capsys):
    assert run("pinney", "--config", SMALL, "--seed", "0x10", "--dry-run") == 0
    assert "seed 16" in capsys.readouterr().out


def test_threads_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HKQ_THREADS", "3")
    assert run("pinney", "--seed", 1, "--dry-run") == 0
    assert "threads: 3" in capsys.readouterr().out
    monkeypatch.setenv("HKQ_THREADS", "zero")
    assert run("pinney", "--seed", 1, "--dry-run") == 2


def test_rerun_is_byte_identical(tmp_path):
    codes = [run("all", "--config", SMALL, "--out", tmp_path / d, "--threads", t)
             for d, t in (("a", 1), ("b", 1), ("c", 3))]
    assert codes[0] == codes[1] == codes[2]
    a, b, c = (checksums(tmp_path / d) for d in "abc")
    assert len(a) > 20 and a == b == c
