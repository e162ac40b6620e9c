import json
import subprocess
import sys

import pytest

from loramixer.cli import main

CONFIG = {
    "n_per_domain": 40,
    "head_steps": 50,
    "model": {"vocab": 16, "seq_len": 10, "d_model": 8, "n_heads": 2, "n_blocks": 1},
    "lora": {"r": 2, "lora_alpha": 4.0},
    "expert_phase": {"steps": 5, "batch_size": 8},
    "router_phase": {"steps": 5, "batch_size": 8},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    common = ["--config", str(cfg), "--seed", "3"]
    assert main(["gen-data", "--out", str(root / "data")] + common) == 0
    assert main(["train-experts", "--data", str(root / "data"), "--out", str(root / "p1")] + common) == 0
    assert main(["train-router", "--data", str(root / "data"), "--checkpoint", str(root / "p1" / "checkpoint"),
                 "--out", str(root / "p2")] + common) == 0
    return root, common


def test_pipeline_outputs(workspace):
    root, _ = workspace
    assert sorted(p.name for p in (root / "data").iterdir()) == [
        "run_manifest.json", "specs.json", "test.jsonl", "train.jsonl", "val.jsonl"]
    assert sorted(p.name for p in (root / "p1" / "bundles").iterdir()) == [f"expert_{e}" for e in range(4)]
    log = [json.loads(line) for line in (root / "p2" / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 5 and {"task", "rsl", "aux", "preserve", "total"} <= set(log[0])
    manifest = json.loads((root / "p2" / "run_manifest.json").read_text())
    assert manifest["exit_status"] == 0 and manifest["seed"] == 3
    assert manifest["config"]["router_phase"]["steps"] == 5
    assert manifest["inputs"]["checkpoint"].endswith("checkpoint")


def test_gen_data_is_deterministic(workspace, tmp_path):
    root, common = workspace
    assert main(["gen-data", "--out", str(tmp_path / "again")] + common) == 0
    for name in ("train.jsonl", "val.jsonl", "test.jsonl"):
        assert (tmp_path / "again" / name).read_bytes() == (root / "data" / name).read_bytes()


def test_eval_full_topk_equals_soft(workspace, capsys):
    root, common = workspace
    args = ["eval", "--data", str(root / "data"), "--checkpoint", str(root / "p2" / "checkpoint")] + common
    capsys.readouterr()
    assert main(args + ["--topk", "4"]) == 0
    full = capsys.readouterr().out
    assert main(args + ["--topk", "soft"]) == 0
    soft = capsys.readouterr().out
    assert full == soft and json.loads(full)["pooled_accuracy"] >= 0.0
    assert main(args + ["--topk", "5"]) == 1
    assert "exceeds" in capsys.readouterr().err


def test_eval_writes_metrics(workspace, tmp_path, capsys):
    root, common = workspace
    assert main(["eval", "--data", str(root / "data"), "--checkpoint", str(root / "p2" / "checkpoint"),
                 "--split", "val", "--out", str(tmp_path / "m")] + common) == 0
    assert json.loads((tmp_path / "m" / "metrics.json").read_text()) == json.loads(capsys.readouterr().out)
    assert (tmp_path / "m" / "run_manifest.json").is_file()


def test_inspect_load_table(workspace, capsys):
    root, common = workspace
    assert main(["inspect-load", "--data", str(root / "data"), "--checkpoint", str(root / "p2" / "checkpoint"),
                 "--topk", "2"] + common) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0].split("\t") == ["layer", "expert", "p_bar", "f_bar", "mean_entropy", "routing_variance"]
    assert len(rows) == 1 + 2 * 4


def test_adapter_commands(workspace, tmp_path, capsys):
    root, common = workspace
    ckpt = str(root / "p1" / "checkpoint")
    assert main(["adapter", "export", "--checkpoint", ckpt, "--expert-id", "1", "--out", str(tmp_path / "b")]
                + common) == 0
    assert main(["adapter", "import", "--checkpoint", ckpt, "--bundle", str(tmp_path / "b"), "--slot", "0",
                 "--out", str(tmp_path / "imported")] + common) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["overall"] == "loadable"
    bundles = [arg for e in range(4) for arg in ("--bundle", str(root / "p1" / "bundles" / f"expert_{e}"))]
    assert main(["adapter", "compose", "--checkpoint", ckpt, "--out", str(tmp_path / "composed")]
                + bundles + common) == 0
    assert main(["train-router", "--data", str(root / "data"), "--checkpoint", str(tmp_path / "composed"),
                 "--out", str(tmp_path / "p2")] + common) == 0


def test_adapter_usage_errors(workspace, tmp_path):
    root, common = workspace
    ckpt = str(root / "p1" / "checkpoint")
    assert main(["adapter", "compose", "--checkpoint", ckpt, "--out", str(tmp_path / "c")] + common) == 2
    assert main(["adapter", "import", "--checkpoint", ckpt, "--out", str(tmp_path / "c")] + common) == 2


def test_train_router_without_checkpoint(workspace, tmp_path, capsys):
    root, common = workspace
    status = main(["train-router", "--data", str(root / "data"), "--out", str(tmp_path / "r")] + common)
    assert status == 1
    assert "AnchorError" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["exit_status"] == 1 and "AnchorError" in manifest["error"]


def test_train_router_from_base_checkpoint(workspace, tmp_path, capsys):
    root, common = workspace
    assert main(["train-router", "--data", str(root / "data"), "--checkpoint", str(root / "data"),
                 "--out", str(tmp_path / "r")] + common) == 1
    assert "AnchorError" in capsys.readouterr().err


def test_usage_errors(workspace, tmp_path):
    root, common = workspace
    with pytest.raises(SystemExit) as info:
        main(["eval", "--frobnicate"])
    assert info.value.code == 2
    assert main(["gen-data", "--out", str(root / "data")] + common) == 2  # not empty
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 3}))
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--config", str(bad)]) == 2
    assert not (tmp_path / "d").exists()
    assert main(["train-experts", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2


def test_console_script_exit_codes(tmp_path):
    run = [sys.executable, "-m", "loramixer.cli"]
    proc = subprocess.run(run + ["verify", "--unknown"], capture_output=True, text=True)
    assert proc.returncode == 2
    proc = subprocess.run(run + ["train-router", "--data", str(tmp_path), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2  # data directory lacks the splits


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 8 and all(line.startswith("PASS") for line in lines)
