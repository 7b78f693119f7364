import json
import subprocess
import sys

import numpy as np
import pytest

from proxdiff.bench import CURVE_COLUMNS, read_csv
from proxdiff.cli import main
from proxdiff.denoise import load_ppm, save_ppm, synthetic_patches

SMALL_BENCH = ["bench", "--problem", "lasso", "--m", "30", "--n", "8", "--iters", "60", "--seed", "3"]


def test_bench_writes_curves(tmp_path, capsys):
    out = tmp_path / "c.csv"
    assert main(SMALL_BENCH + ["--out", str(out)]) == 0
    curves = read_csv(out)
    assert curves.length == 61
    assert "lam=" in capsys.readouterr().out


def test_bench_group_lasso_alias(tmp_path):
    out = tmp_path / "g.csv"
    args = ["bench", "--problem", "group-lasso", "--m", "30", "--n", "5", "--group-size", "3",
            "--iters", "20", "--out", str(out)]
    assert main(args) == 0
    assert read_csv(out).length == 21


def test_bench_degenerate_exit_code(tmp_path, capsys):
    args = ["bench", "--m", "30", "--n", "6", "--iters", "10", "--lam", "1e6", "--out", str(tmp_path / "x.csv")]
    assert main(args) == 2
    assert "degenerate" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"problem": "lasso", "m": 30, "n": 8, "iters": 40, "seed": 3,
                               "out": str(tmp_path / "from_file.csv")}))
    assert main(["bench", "--config", str(cfg)]) == 0
    assert read_csv(tmp_path / "from_file.csv").length == 41
    flag_out = tmp_path / "from_flag.csv"
    assert main(["bench", "--config", str(cfg), "--iters", "25", "--out", str(flag_out)]) == 0
    assert read_csv(flag_out).length == 26


def test_config_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 5}))
    with pytest.raises(SystemExit):
        main(["bench", "--config", str(cfg)])


def test_rates_table(tmp_path, capsys):
    out = tmp_path / "c.csv"
    main(SMALL_BENCH + ["--out", str(out)])
    capsys.readouterr()
    assert main(["rates", str(out)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[:2] == ["sequence", "slope"]
    assert [line.split()[0] for line in table[1:]] == list(CURVE_COLUMNS)


def test_bench_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(SMALL_BENCH + ["--out", str(a)])
    main(SMALL_BENCH + ["--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def train_args(tmp_path, tag):
    return ["denoise-train", "--epochs", "1", "--inner-iters", "20", "--filters", "2", "--patch", "8",
            "--count", "2", "--out", str(tmp_path / f"theta_{tag}.csv"),
            "--log", str(tmp_path / f"loss_{tag}.csv")]


def test_denoise_train_and_apply(tmp_path):
    assert main(train_args(tmp_path, "a")) == 0
    theta = np.loadtxt(tmp_path / "theta_a.csv", delimiter=",")
    assert theta.shape == (2, 24)
    log = (tmp_path / "loss_a.csv").read_text().splitlines()
    assert log[0] == "epoch,step,image_id,loss,psnr"
    assert len(log) == 1 + 2 * 2
    img = tmp_path / "in.pgm"
    save_ppm(img, synthetic_patches(1, 12, seed=0)[0])
    rec = tmp_path / "out.pgm"
    args = ["denoise-apply", "--theta", str(tmp_path / "theta_a.csv"), "--in", str(img),
            "--out", str(rec), "--inner-iters", "30"]
    assert main(args) == 0
    assert load_ppm(rec).shape == (12, 12, 1)


def test_denoise_train_from_directory(tmp_path):
    data = tmp_path / "imgs"
    data.mkdir()
    for i, p in enumerate(synthetic_patches(2, 10, 3, seed=4)):
        save_ppm(data / f"{i}.ppm", p)
    args = train_args(tmp_path, "d") + ["--data", str(data)]
    assert main(args) == 0
    with pytest.raises(SystemExit):
        main(train_args(tmp_path, "e") + ["--data", str(data), "--patch", "16"])


def test_denoise_outputs_byte_identical(tmp_path):
    main(train_args(tmp_path, "a"))
    main(train_args(tmp_path, "b"))
    assert (tmp_path / "theta_a.csv").read_bytes() == (tmp_path / "theta_b.csv").read_bytes()
    assert (tmp_path / "loss_a.csv").read_bytes() == (tmp_path / "loss_b.csv").read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "proxdiff.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "denoise-train" in proc.stdout
    bad = subprocess.run([sys.executable, "-m", "proxdiff.cli", "bench", "--m", "x"], capture_output=True)
    assert bad.returncode != 0


def test_full_scale_presets_yield_to_flags(tmp_path):
    args = ["denoise-train", "--full-scale", "--epochs", "0", "--inner-iters", "5", "--filters", "1",
            "--patch", "8", "--count", "1", "--channels", "1",
            "--out", str(tmp_path / "t.csv"), "--log", str(tmp_path / "l.csv")]
    assert main(args) == 0
    assert np.loadtxt(tmp_path / "t.csv", delimiter=",").shape == (24,)
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 2
