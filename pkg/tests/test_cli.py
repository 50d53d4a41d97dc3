import subprocess
import sys

import numpy as np
import pytest

from deepfix.cli import main
from deepfix.fileio import read_netpbm, write_netpbm
from deepfix.metrics import METRIC_COLUMNS


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--count", "6", "--val", "2", "--seed", "1"]) == 0
    return root / "manifest.tsv"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--manifest", str(dataset), "--out", str(out), "--iters", "4",
                 "--batch", "2", "--eval-every", "2", "--seed", "3"]) == 0
    return out


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    assert "all 14 gradient checks passed" in capsys.readouterr().out


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--iters", "many"])
    assert exc.value.code == 2


def test_console_script_runs():
    done = subprocess.run([sys.executable, "-m", "deepfix", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "ablate" in done.stdout


def test_train_writes_archive_and_log(trained):
    log = (trained / "train_log.tsv").read_text().splitlines()
    assert log[0].startswith("iteration\ttrain_loss")
    assert len(log) == 5
    assert (trained / "weights.dfx").read_bytes()[:4] == b"DFX1"


def test_train_is_reproducible(dataset, trained, tmp_path):
    assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path), "--iters", "4",
                 "--batch", "2", "--eval-every", "2", "--seed", "3"]) == 0
    for name in ("weights.dfx", "train_log.tsv"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_evaluate_without_test_split_exits_three(dataset, trained, tmp_path, capsys):
    code = main(["evaluate", "--weights", str(trained / "weights.dfx"), "--manifest", str(dataset),
                 "--out", str(tmp_path / "r.tsv")])
    assert code == 3
    assert "no 'test' records" in capsys.readouterr().err


def test_evaluate_report_is_reproducible(dataset, trained, tmp_path):
    args = ["evaluate", "--weights", str(trained / "weights.dfx"), "--manifest", str(dataset),
            "--split", "val", "--emd-grid", "8", "--auc-splits", "5"]
    assert main(args + ["--out", str(tmp_path / "a.tsv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.tsv")]) == 0
    text = (tmp_path / "a.tsv").read_text()
    assert text == (tmp_path / "b.tsv").read_text()
    lines = text.splitlines()
    assert lines[1].split("\t") == ["image", *METRIC_COLUMNS]
    assert len(lines) == 2 + 2 + 1


def test_predict_keeps_size_and_range(trained, tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (50, 67, 3))
    write_netpbm(tmp_path / "odd.ppm", img, 255)
    outs = []
    for sub in ("a", "b"):
        assert main(["predict", "--weights", str(trained / "weights.dfx"), str(tmp_path / "odd.ppm"),
                     "--out", str(tmp_path / sub)]) == 0
        outs.append((tmp_path / sub / "odd.pgm").read_bytes())
    assert outs[0] == outs[1]
    arr, maxval = read_netpbm(tmp_path / "a" / "odd.pgm")
    assert arr.shape == (50, 67) and maxval == 65535
    assert arr.min() == 0 and arr.max() == 65535
    heat, hmax = read_netpbm(tmp_path / "a" / "odd_heatmap.pgm")
    assert heat.shape == (50, 67) and hmax == 255


def test_predict_config_mismatch_exits_three(trained, tmp_path):
    write_netpbm(tmp_path / "x.ppm", np.zeros((8, 8, 3)), 255)
    code = main(["predict", "--config", "full", "--weights", str(trained / "weights.dfx"),
                 str(tmp_path / "x.ppm"), "--out", str(tmp_path)])
    assert code == 3


def test_missing_manifest_exits_three(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "none.tsv"), "--out", str(tmp_path)]) == 3


def test_ablate_report_shape(dataset, tmp_path):
    out = tmp_path / "ablation.tsv"
    assert main(["ablate", "--manifest", str(dataset), "--out", str(out), "--seeds", "1",
                 "--iters", "2", "--batch", "2", "--eval-every", "2", "--emd-grid", "8",
                 "--auc-splits", "3"]) == 0
    rows = [l.split("\t") for l in out.read_text().splitlines() if not l.startswith("#")]
    assert rows[0][1:8] == list(METRIC_COLUMNS)
    assert [r[0] for r in rows[1:]] == ["DF-No-LBC", "DF-Explicit-CB", "DF-LBC"]
    assert all(len(r) == len(rows[0]) for r in rows)
