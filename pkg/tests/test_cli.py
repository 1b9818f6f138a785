import json
import subprocess
import sys

import numpy as np
import pytest

from evodrop.cli import main
from evodrop.datasets import read_sparse_text, write_idx
from evodrop.mlp import load_checkpoint

SMALL = ["--synthetic-d", "8", "--synthetic-n", "200"]


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def test_verify_passes(tmp_path, capsys):
    assert run(tmp_path, "verify", "--seed", "0", "--trials", "20000") == 0
    assert (tmp_path / "report.txt").read_text().splitlines()[-1].endswith("checks passed")
    assert "FAIL" not in capsys.readouterr().out


def test_verify_injected_fault(tmp_path, capsys):
    assert run(tmp_path, "verify", "--seed", "0", "--trials", "20000", "--inject-fault", "sqnorm-sign") == 1
    err = capsys.readouterr().err
    assert "sqnorm-closed-vs-enumeration" in err
    records = json.loads((tmp_path / "report.json").read_text())
    assert any(not r["passed"] for r in records)


def test_missing_seed(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "train-shallow", *SMALL)
    assert exc.value.code == 2


def test_zero_steps(tmp_path):
    assert run(tmp_path, "train-shallow", "--seed", "1", *SMALL, "--steps", "0") == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("0,")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_train_err"] == 1.0 and summary["mode"] == "data-dependent"


def test_mode_alias_and_identical_bytes(tmp_path):
    args = ["train-shallow", "--seed", "4", *SMALL, "--mode", "s-dropout", "--steps", "300", "--eval-every", "100"]
    run(tmp_path / "a", *args)
    run(tmp_path / "b", *args)
    a, b = (tmp_path / "a" / "trace.csv").read_bytes(), (tmp_path / "b" / "trace.csv").read_bytes()
    assert a == b
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["mode"] == "standard"


def test_compare_shallow(tmp_path):
    code = run(tmp_path, "compare", "shallow", "--seed", "0", *SMALL, "--steps", "400", "--eval-every", "100")
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "median_steps_ratio" in summary and summary["command"] == "compare-shallow"
    assert (tmp_path / "trace-standard.csv").exists() and (tmp_path / "trace-data-dependent.csv").exists()


def test_gen_data_round_trip(tmp_path):
    assert run(tmp_path, "gen-data", "--seed", "2", "--d", "5", "--n", "30", "--moments", "1,2,3,4,5") == 0
    data = read_sparse_text(tmp_path / "synthetic.txt", n_features=5)
    assert len(data) == 30
    meta = json.loads((tmp_path / "gen-data.json").read_text())
    assert meta["moments"] == [1.0, 2.0, 3.0, 4.0, 5.0]
    out = tmp_path / "run"
    assert main(["train-shallow", "--seed", "0", "--data", str(tmp_path / "synthetic.txt"),
                 "--steps", "50", "--eval-every", "25", "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["d"] == 5


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[common]\nseed = 3\n\n[train-shallow]\nsteps = 40\neval-every = 20\nsynthetic-d = 6\n"
                   "synthetic-n = 100\nmode = u-dropout\n")
    assert run(tmp_path, "train-shallow", "--config", str(cfg), "--steps", "60") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seeds"] == [3] and summary["steps"] == 60 and summary["mode"] == "uniform"
    assert summary["eval_every"] == 20 and summary["d"] == 6


def test_bad_data_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2-3\n")
    assert run(tmp_path, "train-shallow", "--seed", "0", "--data", str(bad)) == 2
    assert "error" in capsys.readouterr().err


def test_train_deep_writes_checkpoint(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=60)
    images = rng.integers(0, 60, size=(60, 4, 4)) + 60 * labels[:, None, None]
    d = tmp_path / "idx"
    d.mkdir()
    write_idx(images, labels, d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    write_idx(images[:20], labels[:20], d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    assert run(tmp_path, "train-deep", "--seed", "0", "--mnist-dir", str(d), "--hidden", "5",
               "--epochs", "2", "--batch-size", "16", "--mode", "e-dropout") == 0
    net = load_checkpoint(tmp_path / "checkpoint.bin")
    assert tuple(net.sizes) == (16, 5, 3)
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(rows) == 4
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_test_err"] is not None


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "evodrop", "gen-data", "--seed", "0", "--d", "3", "--n", "4",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "synthetic.txt").exists()
