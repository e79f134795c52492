import json
import subprocess
import sys

import pytest

from sfuda.cli import main, render_report
from sfuda.oracle import Oracle, SourceEnsemble
from sfuda.service import OracleServer

SMALL = {
    "suite": {"num_classes": 4, "image_size": 8, "n_per_domain": 80, "n_third_party": 60},
    "source_train": {"learning_rate": 0.05, "epochs": 2},
    "pipeline": {"init_train": {"learning_rate": 0.05, "epochs": 1},
                 "finetune_train": {"learning_rate": 0.05, "epochs": 1},
                 "retrain_train": {"learning_rate": 0.05, "epochs": 1},
                 "dat": {"iterations": 1}, "feature_dim": 16},
    "cp_train": {"learning_rate": 0.05, "epochs": 2},
    "gnp_train": {"learning_rate": 0.05, "epochs": 1},
    "gnp_samples": 20,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture
def world(tmp_path, config):
    data, src = tmp_path / "data", tmp_path / "src"
    assert main(["gen-data", "--config", config, "--seed", "1", "--out", str(data), "--dtype", "u8"]) == 0
    assert main(["train-source", "--config", config, "--seed", "1", "--data", str(data), "--out", str(src)]) == 0
    return data, src / "ensemble"


def test_bad_arguments_exit_2(tmp_path, config):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["run-pipeline", "--seed", "-1"]) == 2
    assert main(["run-pipeline", "--strategy", "zzz"]) == 2
    assert main(["run-baseline", "--config", config, "--out", str(tmp_path)]) == 2  # no --strategy
    assert main(["run-pipeline", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"suite": {"num_classes": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["run-pipeline", "--config", str(bad)]) == 2
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 2
    assert main(["run-pipeline", "--config", config, "--oracle", "http://x"]) == 2


def test_runtime_failure_exit_1(tmp_path, config):
    # nothing listens on port 1
    assert main(["run-pipeline", "--config", config, "--oracle", "tcp://127.0.0.1:1",
                 "--out", str(tmp_path)]) == 1


def test_gen_data_and_train_source(world):
    data, ensemble = world
    assert {p.name for p in data.iterdir()} >= {"source_0", "source_1", "target", "third_party",
                                                 "config.resolved.json"}
    assert len(SourceEnsemble.load(ensemble).models) == 2


def test_run_pipeline_from_files(tmp_path, world, config, capsys):
    data, ensemble = world
    out = tmp_path / "run"
    args = ["run-pipeline", "--config", config, "--data", str(data), "--ensemble", str(ensemble),
            "--out", str(out)]
    assert main(args) == 0
    report = json.loads((out / "report.json").read_text())
    assert [q["count"] for q in report["queries"]] == [60, 60]
    assert "wall_clock" not in report
    assert "wall_clock" in json.loads((out / "timing.json").read_text())
    for name in ("config.resolved.json", "loss_curves.csv", "final.bin", "final.json"):
        assert (out / name).is_file()
    first = (out / "report.json").read_bytes()
    assert main(args) == 0
    assert (out / "report.json").read_bytes() == first
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    assert "final_finetune" in capsys.readouterr().out


def test_run_via_tcp_matches_inproc(tmp_path, world, config):
    data, ensemble = world
    server = OracleServer(Oracle(SourceEnsemble.load(ensemble)))
    server.start_background()
    try:
        common = ["--config", config, "--data", str(data), "--ablation", "another"]
        assert main(["run-pipeline", *common, "--oracle", server.address, "--out", str(tmp_path / "tcp")]) == 0
    finally:
        server.shutdown()
        server.server_close()
    assert main(["run-pipeline", *common, "--ensemble", str(ensemble), "--out", str(tmp_path / "ip")]) == 0
    assert (tmp_path / "tcp" / "final.bin").read_bytes() == (tmp_path / "ip" / "final.bin").read_bytes()


@pytest.mark.parametrize("strategy,count", [("cp", 4), ("gnp", 20)])
def test_run_baseline(tmp_path, config, strategy, count):
    out = tmp_path / strategy
    assert main(["run-baseline", "--config", config, "--strategy", strategy, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [q["count"] for q in report["queries"]] == [count]
    assert report["extra"]["strategy"] == strategy


def test_attack_merges_into_report(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "report.json").write_text(json.dumps({"stages": [], "extra": {"keep": 1}}))
    cfg = tmp_path / "mia.json"
    cfg.write_text(json.dumps({
        "suite": {"num_classes": 4, "image_size": 8, "n_per_domain": 60, "n_third_party": 40},
        "members": 20, "source_train": {"learning_rate": 0.05, "epochs": 2},
        "init_train": {"learning_rate": 0.05, "epochs": 1}, "attack_train": {"learning_rate": 0.05, "epochs": 2},
    }))
    assert main(["attack", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["extra"] == {"keep": 1}
    assert set(report["mia"]["acc_judge"]) == {"shadow", "source_model", "sfuda_init"}
    assert "Acc_judge[sfuda_init]" in render_report(report)
    cfg.write_text(json.dumps({"members": 5, "typo": 1}))
    assert main(["attack", "--config", str(cfg), "--out", str(out)]) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "sfuda", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "run-pipeline" in res.stdout
