import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cadvae.cli import main, parse_config_text, parse_run_config
from cadvae.data import load_dataset
from cadvae.editing import read_ppm
from cadvae.errors import ConfigError
from cadvae.trainer import TrainConfig

TINY_CONFIG = """\
# tiny run
d_x = 4
d_y = 2
d_s = 2
d_r = 2
image_size = 8
batch_size = 16
epochs = 1
seed = 5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "train.cadv"), "--n", "64", "--size", "8",
                 "--bias-rate", "0.9", "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(root / "test.cadv"), "--n", "80", "--size", "8",
                 "--unbiased", "--seed", "2"]) == 0
    (root / "run.cfg").write_text(TINY_CONFIG)
    assert main(["train", "--config", str(root / "run.cfg"), "--data", str(root / "train.cadv"),
                 "--out", str(root / "run")]) == 0
    return root


def test_help_exits_zero():
    out = subprocess.run([sys.executable, "-m", "cadvae", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
    out = subprocess.run([sys.executable, "-m", "cadvae", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--config" in out.stdout


@pytest.mark.parametrize("rate,unbiased,expect", [(0.7, False, 0.7), (0.95, False, 0.95), (0.7, True, 0.1)])
def test_gen_data_reports_rate(tmp_path, capsys, rate, unbiased, expect):
    argv = ["gen-data", "--out", str(tmp_path / "d.cadv"), "--n", "10000", "--bias-rate", str(rate), "--seed", "3"]
    assert main(argv + (["--unbiased"] if unbiased else [])) == 0
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("empirical bias rate")][0]
    assert abs(float(line.split(":")[1]) - expect) <= 0.02
    assert len(load_dataset(tmp_path / "d.cadv")) == 10000


def test_exit_codes(tmp_path, workdir, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--n", "5", "--bias-rate", "2"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "abc", "--out", "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    assert main(["gen-data", "--out", str(tmp_path / "missing" / "d.cadv"), "--n", "5"]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.cadc"), "--test-data", str(workdir / "test.cadv")]) == 3
    bad = tmp_path / "bad.cadv"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["export-latents", "--checkpoint", str(workdir / "run" / "checkpoint.cadc"),
                 "--data", str(bad), "--out", str(tmp_path / "z.csv")]) == 5
    (tmp_path / "bad.cfg").write_text("lambda_cmi = 5\nwhatever = 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data", str(workdir / "train.cadv"),
                 "--out", str(tmp_path / "r")]) == 2
    (tmp_path / "range.cfg").write_text("lambda_lri = 500\n")
    assert main(["train", "--config", str(tmp_path / "range.cfg"), "--data", str(workdir / "train.cadv"),
                 "--out", str(tmp_path / "r")]) == 2
    capsys.readouterr()


def test_divergence_exit_code(tmp_path, workdir):
    (tmp_path / "hot.cfg").write_text(TINY_CONFIG + "lr_main = 1e300\n")
    assert main(["train", "--config", str(tmp_path / "hot.cfg"), "--data", str(workdir / "train.cadv"),
                 "--out", str(tmp_path / "r")]) == 4


def test_config_parsing():
    cfg = parse_config_text("lambda_cmi = 2.5  # note\n\ncmi_conditional_variant = true\n")
    assert cfg.lambda_cmi == 2.5 and cfg.cmi_conditional_variant is True
    assert parse_config_text(TrainConfig().to_text()) == TrainConfig()
    for bad in ("nonsense", "epochs = x", "epochs = 1\nepochs = 2", "foo = 1"):
        with pytest.raises(ConfigError):
            parse_config_text(bad)
    rc = parse_run_config("seed = 4\nbias_rate = 0.95\nimage_size = 8\nout_dir = runs/a\n")
    assert rc.train.seed == 4 and rc.bias.seed == 4 and rc.bias.bias_rate == 0.95
    assert rc.train.image_size == 8 and rc.paths == {"out_dir": "runs/a"}


def test_train_outputs(workdir):
    run = workdir / "run"
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["epoch"] == 1 and "total_main" in rec and "acc_s_from_zY" in rec
    assert (run / "checkpoint.cadc").exists() and (run / "checkpoint.cadc.cfg").exists()


def test_eval_is_deterministic(workdir, tmp_path):
    ck, test = str(workdir / "run" / "checkpoint.cadc"), str(workdir / "test.cadv")
    for name in ("a.json", "b.json"):
        assert main(["eval", "--checkpoint", ck, "--test-data", test, "--out", str(tmp_path / name)]) == 0
    a = json.loads((tmp_path / "a.json").read_text())
    assert a == json.loads((tmp_path / "b.json").read_text())
    assert set(a) == {"accuracy", "dp", "eod", "delta_fid", "delta_is", "probe_seed", "n_eval"}
    assert a["n_eval"] == 40


def test_editing_commands(workdir, tmp_path):
    ck, data = str(workdir / "run" / "checkpoint.cadc"), str(workdir / "test.cadv")
    assert main(["counterfactual", "--checkpoint", ck, "--data", data, "--source-idx", "0",
                 "--ref-idx", "3", "--out", str(tmp_path)]) == 0
    assert read_ppm(tmp_path / "counterfactual_0-3.ppm").shape == (5 * 8 + 12, 2 * 8 + 6, 3)
    assert main(["traverse", "--checkpoint", ck, "--data", data, "--mode", "blue", "--out", str(tmp_path)]) == 0
    assert read_ppm(tmp_path / "traverse_blue_0-1.ppm").shape == (4 * 8 + 10, 4 * 8 + 10, 3)
    assert main(["traverse", "--checkpoint", ck, "--data", data, "--mode", "red", "--out", str(tmp_path)]) == 0
    assert read_ppm(tmp_path / "traverse_red_0-1.ppm").shape == (4 * 8 + 10, 3 * 8 + 8, 3)
    assert main(["counterfactual", "--checkpoint", ck, "--data", data, "--source-idx", "999",
                 "--out", str(tmp_path)]) == 2


def test_export_latents(workdir, tmp_path):
    out = tmp_path / "z.csv"
    assert main(["export-latents", "--checkpoint", str(workdir / "run" / "checkpoint.cadc"),
                 "--data", str(workdir / "test.cadv"), "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0][:5] == ["index", "y", "s", "zX_0", "zX_1"]
    assert rows[0][-1] == "zR_1" and len(rows[0]) == 3 + 10
    assert len(rows) == 81
    ds = load_dataset(workdir / "test.cadv")
    assert int(rows[5][1]) == ds.y[4] and int(rows[5][2]) == ds.s[4]


def test_ablate_schema(workdir, tmp_path):
    assert main(["ablate", "--config", str(workdir / "run.cfg"), "--data", str(workdir / "train.cadv"),
                 "--test-data", str(workdir / "test.cadv"), "--out", str(tmp_path), "--drop", "all"]) == 0
    res = json.loads((tmp_path / "ablation.json").read_text())
    assert res["drop"] == "all"
    assert res["ablated"]["lambda_cmi"] == res["ablated"]["lambda_lri"] == res["ablated"]["gamma_tc"] == 0.0
    assert res["full"]["lambda_cmi"] == 5.0
    for block in ("full", "ablated"):
        for key in ("accuracy", "dp", "eod", "delta_fid", "delta_is", "opponent_acc_s_from_zY"):
            assert key in res[block]
    assert (tmp_path / "full" / "checkpoint.cadc").exists()
    assert (tmp_path / "drop_all" / "train_log.jsonl").exists()


@pytest.mark.parametrize("value,code", [("2", 0), ("zero", 2), ("0", 2)])
def test_threads_env(workdir, tmp_path, monkeypatch, value, code):
    monkeypatch.setenv("CADVAE_THREADS", value)
    assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.cadc"),
                 "--test-data", str(workdir / "test.cadv")]) == code
