import csv
import json
import subprocess
import sys

import pytest

from t3slab.cli import main, verify_bundle

SMALL = """\
data.num_examples=8
data.heldout_examples=8
base.num_examples=16
base.steps=3
dllm.base_steps=3
arch.embed_dim=8
arch.num_layers=1
arch.max_seq_len=48
train.batch_size=4
train.num_steps=3
dllm.num_steps=3
dllm.checkpoint_every=1
transfer.num_steps=2
sketch.k=2
sketch.num_examples=8
mix.steps_per_teacher=2
cross.embed_dim=4
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.txt"
    p.write_text(SMALL)
    return str(p)


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_shock_zero_steps_single_checkpoint(tmp_path, small_cfg):
    out = tmp_path / "b"
    assert main(["run", "shock", "--config", small_cfg, "--set", "train.num_steps=0", "--out", str(out)]) == 0
    table = rows(out / "metrics.csv")
    assert table[0] == ["step", "loss", "train_acc"] and len(table) == 2 and table[1][0] == "0"
    assert verify_bundle(out) == []
    for name in ("selection.txt", "profile.csv", "delta_rankings.csv", "traces.tsv", "log.jsonl"):
        assert (out / name).exists()


def test_rrt_with_no_post_bottleneck_update_equals_theta0(tmp_path, small_cfg):
    out = tmp_path / "b"
    assert main(["run", "rrt", "--config", small_cfg, "--set", "train.num_steps=0", "--out", str(out)]) == 0
    by_model = {r[0]: r[1:] for r in rows(out / "rrt.csv")[1:]}
    assert by_model["rrt"] == by_model["theta0"]


def test_rerun_from_persisted_config(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "shock", "--config", small_cfg, "--seed", "2", "--tau", "0.1", "--out", str(a)]) == 0
    assert main(["run", "shock", "--config", str(a / "config.txt"), "--out", str(b)]) == 0
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma == mb
    assert "seed=2" in (a / "config.txt").read_text().splitlines()


def test_same_preset_dir_reused_other_refused(tmp_path, small_cfg):
    out = tmp_path / "b"
    assert main(["run", "shock", "--config", small_cfg, "--out", str(out)]) == 0
    assert main(["run", "shock", "--config", small_cfg, "--out", str(out)]) == 0
    assert main(["run", "rrt", "--config", small_cfg, "--out", str(out)]) == 2
    junk = tmp_path / "junk"
    junk.mkdir()
    (junk / "file").write_text("x")
    assert main(["run", "shock", "--config", small_cfg, "--out", str(junk)]) == 2
    assert (junk / "file").read_text() == "x"


def test_config_errors_exit_2(tmp_path, small_cfg, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("no_such_key=1\n")
    assert main(["run", "shock", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "shock", "--config", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "shock", "--config", small_cfg, "--set", "tau=-1", "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "nonsense", "--out", str(tmp_path / "o")]) == 2
    assert main([]) == 2
    assert "config error" in capsys.readouterr().err


def test_degenerate_selection_exit_3(tmp_path, small_cfg, capsys):
    # with no training before profiling there are no anchors, so the sweep has nothing to step on
    out = tmp_path / "o"
    assert main(["run", "one_step", "--config", small_cfg, "--set", "train.num_steps=0", "--out", str(out)]) == 3
    assert "one_step" in capsys.readouterr().err
    last = json.loads((out / "log.jsonl").read_text().splitlines()[-1])
    assert last["msg"] == "preset failed"


def test_verify_detects_tampering(tmp_path, small_cfg):
    out = tmp_path / "b"
    assert main(["run", "shock", "--config", small_cfg, "--out", str(out)]) == 0
    assert main(["verify", str(out)]) == 0
    sel = out / "selection.txt"
    lines = sel.read_text().splitlines()
    lines[0] = lines[0].replace("B:", "B: 999", 1)
    sel.write_text("\n".join(lines) + "\n")
    problems = verify_bundle(out)
    assert any("hash mismatch for selection.txt" in p for p in problems)
    assert any(p.startswith("selection.txt:") for p in problems)
    assert main(["verify", str(out)]) == 3
    assert main(["verify", str(tmp_path / "nothing")]) == 3


def test_console_script_runs(tmp_path, small_cfg):
    out = tmp_path / "b"
    r = subprocess.run([sys.executable, "-m", "t3slab.cli", "run", "rrt", "--config", small_cfg, "--out", str(out)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "t3slab.cli", "verify", str(out)], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("OK rrt")
