import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dpolab.cli import main
from dpolab.config import RunConfig


@pytest.fixture
def run(tmp_path, desk_pool, pool_cache):
    """Write a config into tmp_path and invoke the CLI in-process."""

    def invoke(command, config=None, *extra):
        cfg = {"output": str(tmp_path / "out"), "pool": {"cache_dir": pool_cache}}
        for key, value in (config or {}).items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key] = dict(cfg[key], **value)
            else:
                cfg[key] = value
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg))
        return main([command, "--config", str(path), *extra])

    invoke.out = tmp_path / "out"
    return invoke


def manifest(out, command, run_id="desk"):
    return json.loads((out / f"{run_id}.{command}.manifest.json").read_text())


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dpolab", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr


@pytest.mark.parametrize("text", ["{not json", '{"attack": {"eps": 0.1}}', '{"colour": 1}',
                                  '{"transform": {"kind": "warp"}}', '{"batch": {"size": 0}}'])
def test_bad_configs_exit_2(tmp_path, text, capsys):
    path = tmp_path / "bad.json"
    path.write_text(text)
    assert main(["attack", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_missing_config_and_bad_workers_exit_2(tmp_path):
    assert main(["attack", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["attack", "--workers", "0", "--out", str(tmp_path)]) == 2


def test_zero_budget_attack_returns_the_batch(run, desk_data):
    cfg = {"attack": {"epsilon": 0.0, "iterations": 3, "checkpoint_epochs": [1, 3]}, "batch": {"size": 12}}
    assert run("attack", cfg) == 0
    images, _ = RunConfig.from_dict(cfg).batch(desk_data[1])
    for epoch in (1, 3):
        assert np.array_equal(np.load(run.out / f"desk.attack.t{epoch}.npy"), images)
    m = manifest(run.out, "attack")
    assert m["budget_violations"] == 0
    assert m["outputs"] == ["desk.attack.json", "desk.attack.t1.npy", "desk.attack.t3.npy"]


def test_dpo_manifest_reports_bisection_cost(run):
    cfg = {"attack": {"iterations": 2}, "batch": {"size": 16}, "dpo": {"refine_width": 1}}
    assert run("dpo", cfg) == 0
    m = manifest(run.out, "dpo")
    assert m["evaluations"]["z"]["bisection"] == 10
    assert m["evaluations"]["z"]["refinement"] <= 3
    report = json.loads((run.out / "desk.dpo.json").read_text())
    assert report["z"] == m["z"] and 0.02 <= m["z"][0] <= 0.5
    assert set(report["test_asr"]) == {"mlp2-s2", "cnn-b-s2", "cnn-c-s2", "cnn-a-s2"}


def test_dpo_on_a_parameterless_transform_is_rejected(run):
    assert run("dpo", {"transform": {"kind": "identity", "z": []}}) == 2


def test_reports_are_byte_identical_across_worker_counts(run):
    cfg = {"attack": {"iterations": 2}, "batch": {"size": 24},
           "sweep": {"z_values": [0.04, 0.3], "iterations": [1, 2], "seeds": [0, 1]}}
    snapshots = []
    for workers in ("1", "8"):
        assert run("sweep", cfg, "--workers", workers) == 0
        snapshots.append({p: (run.out / p).read_bytes() for p in sorted(os.listdir(run.out)) if "models" not in p})
    assert snapshots[0] == snapshots[1]
    assert set(snapshots[0]) == {"desk.sweep.json", "desk.sweep.manifest.json"}


def test_report_converts_sweep_json_to_csv(run, tmp_path):
    cfg = {"attack": {"iterations": 1}, "batch": {"size": 8},
           "sweep": {"z_values": [0.1, 0.2, 0.3], "iterations": [1, 2]}}
    assert run("sweep", cfg) == 0
    m = manifest(run.out, "sweep")
    assert set(m["unimodal"]) == {"1", "2"} and len(m["optimal_z"]["trajectory"]) == 2
    assert run("report", cfg, "--input", str(run.out / "desk.sweep.json"), "--format", "csv") == 0
    rows = list(csv.reader(open(run.out / "desk.sweep.csv")))
    assert rows[0] == ["kind", "z", "T", "model", "seed", "asr"]
    assert len(rows) == 1 + 3 * 2 * 8
    converted = (run.out / "desk.sweep.csv").read_bytes()
    assert run("sweep", dict(cfg, report={"format": "csv"})) == 0
    assert (run.out / "desk.sweep.csv").read_bytes() == converted
    assert run("report", cfg) == 2


def test_report_rejects_unknown_inputs(run, tmp_path):
    other = tmp_path / "thing.json"
    other.write_text("{}")
    assert run("report", {}, "--input", str(other)) == 2
    assert run("report", {}, "--input", str(tmp_path / "absent.sweep.json")) == 1


def test_kl_probe_and_train(run):
    cfg = {"kl": {"sample_count": 20, "z_values": [0.0, 0.25]}}
    assert run("kl-probe", cfg) == 0
    kl = json.loads((run.out / "desk.kl.json").read_text())
    assert kl["mean"][0] == pytest.approx(0.0, abs=1e-9) and kl["mean"][1] > 0
    assert run("train") == 0
    report = json.loads((run.out / "desk.train.json").read_text())
    assert len(report["models"]) == 9
    assert all(r["eval_accuracy"] > 0.9 for r in report["models"].values())


def test_seed_override_is_recorded(run):
    assert run("attack", {"attack": {"iterations": 1}, "batch": {"size": 4}}, "--seed", "7") == 0
    m = manifest(run.out, "attack")
    assert m["overrides"]["seed"] == 7 and m["seeds"]["attack"] == 7


def test_null_batch_size_means_the_whole_eval_split(desk_data):
    images, labels = RunConfig.from_dict({}).batch(desk_data[1])
    assert np.array_equal(images, desk_data[1].images) and np.array_equal(labels, desk_data[1].labels)
    sub, _ = RunConfig.from_dict({"batch": {"size": 5}, "seed": 2}).batch(desk_data[1])
    again, _ = RunConfig.from_dict({"batch": {"size": 5}, "seed": 2}).batch(desk_data[1])
    assert sub.shape[0] == 5 and np.array_equal(sub, again)
