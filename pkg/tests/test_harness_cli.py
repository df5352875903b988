import json
from dataclasses import replace

import numpy as np
import pytest

from kddg_lab import __version__, cli, harness, nn
from kddg_lab.config import ExperimentConfig, load_config
from kddg_lab.distill import DistillConfig, FilterSpec
from kddg_lab.errors import ConfigError
from kddg_lab.synthdata import gen_domains


def tiny(**kw):
    base = dict(epochs=3, hidden=[12, 12], seeds=[0, 1],
                benchmark={"samples_per_domain": 60}, mi_folds=3)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def tiny_rl(**kw):
    rl = dict(episodes=3, train_max_steps=60, max_steps=80, eval_episodes=2, hidden=8)
    rl.update(kw)
    return ExperimentConfig.from_dict({"kind": "rl", "seeds": [0], "rl": rl})


def test_row_count_per_method():
    cfg = tiny(method=["deepall", "kd", "gradfilter", "kddg", "softlabel"])
    rows = harness.run_classification(cfg)
    for m in cfg.method:
        assert sum(r.method == m for r in rows) == 4 * len(cfg.seeds)
    for r in rows:
        assert 0 <= r.source_val_acc <= 1 and 0 <= r.target_acc <= 1
        assert r.cwd >= 0 and r.mi_nats >= 0 and r.sec_per_iter > 0


def test_degenerate_kddg_rows_equal_deepall():
    cfg = tiny(method=["deepall", "kddg"])
    cfg.distill = DistillConfig(lambda_kd=0.0, lambda_ce=1.0, filter=FilterSpec("none"),
                                teacher_gate=False)
    rows = harness.run_classification(cfg)
    da = [r for r in rows if r.method == "deepall"]
    kd = [r for r in rows if r.method == "kddg"]
    for a, b in zip(da, kd):
        assert (a.target, a.seed) == (b.target, b.seed)
        assert (a.source_val_acc, a.target_acc, a.cwd, a.mi_nats) == \
               (b.source_val_acc, b.target_acc, b.cwd, b.mi_nats)


def test_noise_zero_row_equals_classification_row():
    cfg = tiny(method=["deepall"], seeds=[3])
    clean = harness.run_classification(cfg)
    noisy = harness.run_noise_study(cfg, grid=[0.0, 0.4])
    zero = [r for r in noisy if r.noise == 0.0]
    assert len(noisy) == 2 * 4
    for a, b in zip(clean, zero):
        assert (a.target, a.seed, a.source_val_acc, a.target_acc, a.cwd) == \
               (b.target, b.seed, b.source_val_acc, b.target_acc, b.cwd)
    with pytest.raises(ConfigError):
        harness.run_noise_study(cfg, grid=[1.5])


def test_rows_reproducible_and_worker_count_irrelevant():
    cfg = tiny(method=["kddg"])
    a = harness.run_classification(cfg)
    cfg.workers = 3
    b = harness.run_classification(cfg)
    key = lambda r: (r.target, r.seed, r.source_val_acc, r.target_acc, r.cwd, r.mi_nats)
    assert [key(r) for r in a] == [key(r) for r in b]


def test_target_domain_never_read_during_training(tmp_path):
    cfg = tiny(method=["deepall", "kddg"], seeds=[0])
    domains = gen_domains(cfg.benchmark)
    poisoned = list(domains)
    bad = domains[2]
    poisoned[2] = replace(bad, features=np.full_like(bad.features, np.nan))
    harness._classification_task(cfg, domains, 2, 0, 0.0, cfg.method, "c", tmp_path / "clean")
    rows = harness._classification_task(cfg, poisoned, 2, 0, 0.0, cfg.method, "c", tmp_path / "bad")
    assert all(np.isfinite(r.source_val_acc) and np.isfinite(r.cwd) for r in rows)
    for m in cfg.method:
        rel = f"checkpoints/c_{m}_t2_n0_s0/final.ckpt"
        a = nn.load_network(tmp_path / "clean" / rel)
        b = nn.load_network(tmp_path / "bad" / rel)
        assert np.array_equal(a.params(), b.params())


def test_results_csv_schema_and_round_trip(tmp_path):
    cfg = tiny(method=["kddg", "deepall"], seeds=[1, 0])
    rows = harness.run_classification(cfg)
    path = tmp_path / "results.csv"
    harness.write_results(path, list(reversed(rows)))
    header = path.read_text().splitlines()[0].split(",")
    assert header == harness.RESULT_COLUMNS
    back = harness.read_results(path)
    assert back == sorted(rows, key=harness.ResultRow.sort_key)
    path.write_text("method,seed\nx,1\n")
    with pytest.raises(ConfigError):
        harness.read_results(path)


def test_rl_rows_count_and_source_gravity(tmp_path):
    cfg = tiny_rl()
    rows = harness.run_rl(cfg, tmp_path)
    assert len(rows) == 5 * 2 * len(cfg.seeds)
    for m in ("dqn", "kddg"):
        assert any(r.method == m and r.target == "0.0025" for r in rows)
    assert all(r.fuel_mean >= 0 and r.fuel_std >= 0 for r in rows)
    assert (tmp_path / "checkpoints" / "rl_dqn_t0.0025_n0_s0" / "episodes.csv").exists()


def test_bench_same_method_twice_within_20_percent():
    cfg = ExperimentConfig.from_dict({"kind": "bench", "hidden": [32, 32],
                                      "bench": {"methods": ["kddg", "kddg"], "repeats": 10}})
    rows = harness.bench_timing(cfg)
    assert [r.method for r in rows] == ["kddg", "kddg"]
    a, b = rows[0].sec_per_iter, rows[1].sec_per_iter
    assert abs(a - b) <= 0.2 * min(a, b)


def test_bench_report_has_both_methods(tmp_path):
    cfg = ExperimentConfig.from_dict({"kind": "bench", "hidden": [16], "bench": {"repeats": 2}})
    rows = harness.bench_timing(cfg)
    assert [r.method for r in rows] == ["deepall", "kddg"]
    assert rows[0].ratio_to_deepall == 1.0 and rows[1].iterations >= 200
    harness.write_timing(tmp_path / "t.csv", rows)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "method,iterations,repeats,sec_per_iter,ratio_to_deepall" and len(lines) == 3


# config ------------------------------------------------------------------------

@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"distill": {"tau": 2.0, "temperature": 3}},
    {"distill": {"filter": {"kind": "soft"}}},
    {"benchmark": {"dims": 3}},
    {"method": ["deepall", "mixup"]},
    {"seeds": []},
    {"kind": "regression"},
    {"noise": 1.5},
    {"bench": {"methods": ["kd"]}},
    {"bench": {"iterations": 50}},
    {"optimizer": {"kind": "rmsprop"}},
    {"rl": {"gamma": 1.5}},
])
def test_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_config_round_trip_and_hash(tmp_path):
    cfg = tiny()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict() and back.hash() == cfg.hash()
    assert tiny(epochs=4).hash() != cfg.hash()
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


# cli -----------------------------------------------------------------------------

def write_cfg(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_cli_train_writes_results_manifest_and_checkpoints(tmp_path):
    cfg = write_cfg(tmp_path, {"epochs": 2, "hidden": [8, 8], "seeds": [0, 1],
                               "benchmark": {"samples_per_domain": 40}, "mi_folds": 2,
                               "method": ["deepall", "kddg"], "save_snapshots": True})
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--seed", "4", "--out", str(out), "--quiet"]) == 0
    rows = harness.read_results(out / "results.csv")
    assert len(rows) == 2 * 4 and {r.seed for r in rows} == {4}
    man = json.loads((out / "manifest.json").read_text())
    assert man["version"] == __version__ and man["command"] == "train"
    assert man["config_hash"] == ExperimentConfig.from_dict(man["config"]).hash()
    assert "results.csv" in man["outputs"]
    run_dir = out / "checkpoints" / "classification_kddg_t0_n0_s4"
    assert (run_dir / "final.ckpt").exists() and (run_dir / "epoch_0002.ckpt").exists()


def test_cli_gen_data_then_diagnose(tmp_path):
    cfg_doc = {"epochs": 2, "hidden": [8, 8], "seeds": [0], "mi_folds": 2,
               "benchmark": {"samples_per_domain": 40}, "save_snapshots": True,
               "method": ["deepall"]}
    cfg = write_cfg(tmp_path, cfg_doc)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d"), "--quiet"]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--quiet"]) == 0
    run_dir = tmp_path / "t" / "checkpoints" / "classification_deepall_t0_n0_s0"
    cfg_doc["diagnose"] = {"snapshot_dir": str(run_dir), "feature_csv": str(run_dir / "features.csv"),
                           "checkpoint": str(run_dir / "final.ckpt"), "folds": 2,
                           "data_csv": str(tmp_path / "d" / "data.csv")}
    cfg_doc["kind"] = "diagnose"
    cfg = write_cfg(tmp_path, cfg_doc)
    assert cli.main(["diagnose", "--config", cfg, "--out", str(tmp_path / "g"), "--quiet"]) == 0
    lines = (tmp_path / "g" / "diagnostics.csv").read_text().splitlines()
    assert lines[0] == "metric,value,unit,config_hash"
    metrics = {l.split(",")[0]: l.split(",") for l in lines[1:]}
    assert {"cwd", "mi", "fraction_above_0.999"} <= set(metrics)
    assert metrics["mi"][2] == "nats"
    counts = [float(v[1]) for k, v in metrics.items() if k.startswith("confidence_bin_")]
    assert sum(counts) == 4 * 40


def test_cli_bench_writes_timing(tmp_path):
    cfg = write_cfg(tmp_path, {"kind": "bench", "hidden": [8], "bench": {"repeats": 1, "warmup": 0}})
    assert cli.main(["bench", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "timing.csv").read_text().count("\n") == 3


def test_cli_validation_failures_exit_nonzero(tmp_path, capsys):
    bad = write_cfg(tmp_path, {"epochs": 2, "unknown_key": True})
    assert cli.main(["train", "--config", bad, "--out", str(tmp_path)]) != 0
    assert "unknown_key" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) != 0
    empty = write_cfg(tmp_path, {"kind": "diagnose"})
    assert cli.main(["diagnose", "--config", empty, "--out", str(tmp_path)]) != 0
    with pytest.raises(SystemExit) as info:
        cli.main(["fly"])
    assert info.value.code != 0
