import math
import re

import pytest
import yaml

from dpzv.cli import main
from dpzv.model import load_checkpoint
from dpzv.privacy import gdp_to_delta, noise_scale, solve_mu


def write_config(path, **overrides):
    cfg = {
        "seed": 11,
        "dataset": {
            "kind": "synthetic",
            "num_samples": 120,
            "total_dim": 8,
            "num_classes": 2,
            "margin": 6.0,
        },
        "federation": {"num_devices": 2, "staleness_cap": 10},
        "model": {"embed_dim": 4},
        "training": {
            "rounds": 20,
            "batch_size": 8,
            "clip_c": 1e9,
        },
        "privacy": {"sigma_dp": 0.0},
        "eval": {"every": 10, "target_accuracy": 0.9},
    }
    for dotted, value in overrides.items():
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    path.write_text(yaml.safe_dump(cfg))
    return cfg


class TestRun:
    def test_row_count_and_artifacts(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.yaml"
        write_config(cfg_path)
        out = tmp_path / "out"
        assert main(["run", str(cfg_path), "--out", str(out)]) == 0
        lines = (out / "metrics.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + 1 + 20  # header + warmup + rounds
        assert (out / "ledger.csv").exists()
        assert (out / "resolved.yaml").exists()
        ckpt = load_checkpoint(out / "checkpoint.bin")
        assert set(ckpt) == {0, 1, 2}  # head + 2 devices

    def test_reruns_byte_identical(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(cfg_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", str(cfg_path), "--out", str(a)]) == 0
        assert main(["run", str(cfg_path), "--out", str(b)]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "ledger.csv").read_bytes() == (b / "ledger.csv").read_bytes()
        assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()

    def test_resolved_config_round_trips(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(cfg_path)
        a = tmp_path / "a"
        assert main(["run", str(cfg_path), "--out", str(a)]) == 0
        resolved = a / "resolved.yaml"
        b = tmp_path / "b"
        assert main(["run", str(resolved), "--out", str(b)]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_both_privacy_modes_rejected(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(
            cfg_path, **{"privacy.epsilon": 1.0, "privacy.delta": 1e-3,
                         "privacy.sigma_dp": 0.5}
        )
        assert main(["run", str(cfg_path), "--out", str(tmp_path / "x")]) == 2

    def test_unknown_key_rejected_with_location(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.yaml"
        cfg = write_config(cfg_path)
        cfg["training"]["learning_rate_typo"] = 0.1
        cfg_path.write_text(yaml.safe_dump(cfg))
        assert main(["run", str(cfg_path), "--out", str(tmp_path / "x")]) == 2
        err = capsys.readouterr().err
        assert "learning_rate_typo" in err
        assert "line" in err

    def test_missing_required_key(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.yaml"
        cfg = write_config(cfg_path)
        del cfg["training"]["rounds"]
        cfg_path.write_text(yaml.safe_dump(cfg))
        assert main(["run", str(cfg_path), "--out", str(tmp_path / "x")]) == 2
        assert "rounds" in capsys.readouterr().err

    def test_seed_override_changes_run(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(cfg_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", str(cfg_path), "--out", str(a), "--seed", "1"]) == 0
        assert main(["run", str(cfg_path), "--out", str(b), "--seed", "2"]) == 0
        assert (a / "metrics.csv").read_bytes() != (b / "metrics.csv").read_bytes()


class TestBudget:
    def test_mu_from_epsilon_delta(self, capsys):
        assert main(["budget", "--epsilon", "1", "--delta", "1e-3"]) == 0
        out = capsys.readouterr().out
        mu = float(re.search(r"mu = ([0-9.e+-]+)", out).group(1))
        assert abs(mu - solve_mu(1.0, 1e-3)) <= 1e-6

    def test_delta_from_mu_epsilon(self, capsys):
        assert main(["budget", "--mu", "1", "--epsilon", "1"]) == 0
        out = capsys.readouterr().out
        delta = float(re.search(r"delta = ([0-9.e+-]+)", out).group(1))
        assert abs(delta - 0.126937) <= 1e-5

    def test_epsilon_from_mu_delta(self, capsys):
        assert main(["budget", "--mu", "1", "--delta", "1e-3"]) == 0
        out = capsys.readouterr().out
        eps = float(re.search(r"epsilon = ([0-9.e+-]+)", out).group(1))
        assert abs(gdp_to_delta(1.0, eps) - 1e-3) <= 1e-6

    def test_sigma_chain(self, capsys):
        assert main([
            "budget", "--epsilon", "1", "--delta", "1e-3",
            "--T", "100", "--D", "1000", "--C", "10",
        ]) == 0
        out = capsys.readouterr().out
        sigma = float(re.search(r"sigma_dp = ([0-9.e+-]+)", out).group(1))
        mu = solve_mu(1.0, 1e-3)
        assert abs(sigma - noise_scale(10, 100, 1000, mu)) <= 1e-5 * sigma

    def test_exactly_two_required(self, capsys):
        assert main(["budget", "--epsilon", "1"]) == 2
        assert main(["budget", "--epsilon", "1", "--delta", "1e-3", "--mu", "1"]) == 2

    def test_partial_sigma_args_rejected(self, capsys):
        assert main([
            "budget", "--epsilon", "1", "--delta", "1e-3", "--T", "100",
        ]) == 2


class TestSweep:
    def test_epsilon_sweep_monotone_sigma(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(
            cfg_path,
            **{"training.rounds": 10, "privacy.sigma_dp": None,
               "privacy.epsilon": 1.0, "privacy.delta": 1e-3,
               "training.clip_c": 5.0},
        )
        out = tmp_path / "out"
        rc = main([
            "sweep", str(cfg_path), "--axis", "epsilon",
            "--values", "0.5,1,inf", "--out", str(out),
        ])
        assert rc == 0
        lines = (out / "summary.csv").read_text().strip().split("\n")
        assert lines[0] == "value,sigma_dp,final_acc,rounds_to_target,v_t_bytes"
        assert len(lines) == 4
        sigmas = [float(l.split(",")[1]) for l in lines[1:]]
        assert sigmas[0] > sigmas[1] > sigmas[2]
        assert sigmas[2] == 0.0

    def test_empty_values_rejected(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(cfg_path)
        assert main([
            "sweep", str(cfg_path), "--axis", "C", "--values", "",
            "--out", str(tmp_path / "o"),
        ]) == 2

    def test_sweep_reruns_identical(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(cfg_path, **{"training.rounds": 8})
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main([
                "sweep", str(cfg_path), "--axis", "B", "--values", "4,8",
                "--out", str(out),
            ]) == 0
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()

    def test_failed_cell_preserves_partial_results(self, tmp_path):
        cfg_path = tmp_path / "exp.yaml"
        write_config(cfg_path, **{"training.rounds": 8})
        out = tmp_path / "out"
        # batch size 4 works; batch size 500 exceeds the dataset and fails
        rc = main([
            "sweep", str(cfg_path), "--axis", "B", "--values", "4,500",
            "--out", str(out),
        ])
        assert rc == 1
        lines = (out / "summary.csv").read_text().strip().split("\n")
        assert len(lines) == 2  # header + the surviving cell
        assert lines[1].startswith("4,")


class TestUsage:
    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_config_is_config_error(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.yaml")]) in (1, 2)
