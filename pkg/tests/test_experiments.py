import json
import subprocess
import sys
from dataclasses import replace

import pytest

from fedpolicy.cli import main
from fedpolicy.experiments import (
    ConfigError,
    ExperimentConfig,
    compare_runs,
    load_metrics,
    monotonicity_report,
    run_experiment,
    seeded_configs,
)
from fedpolicy.nodes import PHASES

CONFIG_TEXT = """
# small synthetic run
n_clients = 5
rounds = 3
samples_per_client = 40
test_per_client = 10
holdout_size = 100
n_features = 4
n_classes = 3
"""


@pytest.fixture
def small_cfg():
    return ExperimentConfig.from_text(CONFIG_TEXT)


def test_config_parsing(small_cfg):
    assert small_cfg.n_clients == 5 and small_cfg.rounds == 3 and small_cfg.policy_enabled
    cfg = ExperimentConfig.from_text("policy_enabled = off\nattack = TamperLocalAfterHash\nattack_target = 2")
    assert not cfg.policy_enabled and cfg.attack.target == 2


@pytest.mark.parametrize("text", ["b_db_nodes = 4", "n_clients = 0", "bogus = 1", "rounds = many",
                                  "dataset = cifar", "attack = Nope", "attack = TamperLocalAfterHash\nattack_target = 9"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_eighteen_phase_records(small_cfg):
    res = run_experiment(small_cfg)
    assert len(res.metrics) == 18
    assert [(m.round, m.phase) for m in res.metrics] == [(r, p) for r in (1, 2, 3) for p in PHASES]
    assert all(m.accuracy is not None for m in res.metrics if m.phase == "aggregate")
    gas = [m.gas_total for m in res.metrics if m.phase == "store"]
    assert gas == sorted(gas) and gas[0] > 0


def test_best_so_far_accuracy_is_monotone(small_cfg):
    acc = run_experiment(small_cfg).accuracies
    best = [max(acc[:i + 1]) for i in range(len(acc))]
    assert best == sorted(best)


def test_deterministic_runs_match(small_cfg, tmp_path):
    a = run_experiment(small_cfg, tmp_path / "a")
    b = run_experiment(small_cfg, tmp_path / "b")
    assert a.final_digest == b.final_digest
    assert (tmp_path / "a" / "chain.bin").read_bytes() == (tmp_path / "b" / "chain.bin").read_bytes()


def test_policy_modes_same_accuracy(small_cfg):
    on = run_experiment(small_cfg)
    off = run_experiment(replace(small_cfg, policy_enabled=False))
    assert on.accuracies == off.accuracies
    assert on.final_digest == off.final_digest


def test_output_files(small_cfg, tmp_path):
    run_experiment(small_cfg, tmp_path)
    for name in ("metrics.csv", "chain.bin", "audit.jsonl", "summary.json"):
        assert (tmp_path / name).exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["chain_length"] == 3 and summary["failures"] == []
    assert len(load_metrics(tmp_path / "metrics.csv")) == 18


def test_compare_identical_is_zero(small_cfg):
    m = run_experiment(small_cfg).metrics
    assert all(r.delta_ms == 0 and not r.overhead for r in compare_runs(m, m))


def test_compare_mismatched_shapes(small_cfg):
    m = run_experiment(small_cfg).metrics
    with pytest.raises(ValueError):
        compare_runs(m, m[:6])


def test_monotonicity_report():
    series, ok = monotonicity_report({2: {"train": 1.0}, 5: {"train": 2.0}, 10: {"train": 1.5}}, "train")
    assert series == [(2, 1.0), (5, 2.0), (10, 1.5)] and not ok


def test_seeded_configs_are_distinct(small_cfg):
    seeds = {(c.seed_data, c.seed_init, c.seed_shuffle) for _, c in seeded_configs(small_cfg, 20)}
    assert len(seeds) == 20


# -- cli -----------------------------------------------------------------------

def test_cli_run_verify_audit_compare(tmp_path, capsys):
    conf = tmp_path / "exp.conf"
    conf.write_text(CONFIG_TEXT)
    assert main(["run", "--config", str(conf), "--out", str(tmp_path / "on"), "--deterministic"]) == 0
    conf.write_text(CONFIG_TEXT + "policy_enabled = false\n")
    assert main(["run", "--config", str(conf), "--out", str(tmp_path / "off")]) == 0
    assert main(["verify-chain", str(tmp_path / "on" / "chain.bin")]) == 0
    assert "chain OK" in capsys.readouterr().out
    assert main(["audit", str(tmp_path / "on" / "audit.jsonl"), "--round", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(json.loads(line)["round"] == 2 for line in lines)
    assert main(["compare", str(tmp_path / "off"), str(tmp_path / "on")]) == 0
    assert "distribute" in capsys.readouterr().out


def test_cli_detects_corrupt_chain(tmp_path, capsys):
    conf = tmp_path / "exp.conf"
    conf.write_text(CONFIG_TEXT)
    main(["run", "--config", str(conf), "--out", str(tmp_path)])
    path = tmp_path / "chain.bin"
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 4
    path.write_bytes(bytes(data))
    capsys.readouterr()
    assert main(["verify-chain", str(path)]) == 1
    assert "INVALID" in capsys.readouterr().out


def test_cli_attack_writes_scenario(tmp_path):
    conf = tmp_path / "exp.conf"
    conf.write_text(CONFIG_TEXT)
    assert main(["run", "--config", str(conf), "--out", str(tmp_path), "--attack", "TamperLocalAfterHash"]) == 0
    rep = json.loads((tmp_path / "scenarios.jsonl").read_text())
    assert rep["kind"] == "TamperLocalAfterHash" and rep["detected"]


def test_cli_config_error_exit_code(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("b_db_nodes = 2\n")
    assert main(["run", "--config", str(conf), "--out", str(tmp_path / "x")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fedpolicy", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify-chain" in proc.stdout
