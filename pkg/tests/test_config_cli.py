import csv
import json

import numpy as np
import pytest

from attnconv import cli
from attnconv.backbone import ConfigError, build_model, count_params
from attnconv.checkpoint import load_checkpoint
from attnconv.config import network_config, parse_config, parse_value, train_config
from conftest import make_tree


def test_defaults(tmp_path):
    empty = tmp_path / "e.toml"
    empty.write_text("")
    cfg = parse_config(empty, {"data.root": "/data"})
    tc = train_config(cfg)
    assert cfg.data.root == "/data"
    assert tc.schedule.initial == 0.01 and tc.schedule.halve_every == 5
    assert tc.momentum == 0.9 and tc.nesterov and tc.weight_decay == 1e-5
    assert (tc.batch.train, tc.batch.val, tc.batch.eval) == (16, 32, 32)
    assert tc.epochs == 20 and tc.network.input_resolution == 64


def test_zero_batch_names_key():
    with pytest.raises(ConfigError, match=r"batch\.train"):
        parse_config(None, {"batch.train": 0})


def test_flag_beats_file(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("[optim]\nlr = 0.01\n")
    args = cli.build_parser().parse_args(["inspect", "--config", str(f), "--lr", "0.02"])
    cfg = parse_config(args.config, cli.overrides_from_args(args))
    assert cfg.optim.lr == 0.02


@pytest.mark.parametrize(
    "text,key",
    [
        ("[optim]\nlearning_rate = 0.1\n", "optim.learning_rate"),
        ("bogus = 1\n", "bogus"),
        ("[batch]\ntrain = 'big'\n", "batch.train"),
        ("[train]\nepochs = 1.5\n", "train.epochs"),
        ("[network]\ncbam_reduction = 5\n", "network"),
        ("[augment]\nhflip_prob = 2.0\n", "augment"),
    ],
)
def test_rejections_name_key(tmp_path, text, key):
    f = tmp_path / "c.toml"
    f.write_text(text)
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(f)


def test_json_and_custom_network(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"network": {"preset": "custom", "stem_channels": 8, "head_channels": 16,
                                         "resolution": 32, "cbam_reduction": 4,
                                         "stages": [{"expansion_ratio": 2, "kernel": 3, "stride": 2,
                                                     "in_channels": 8, "out_channels": 16}]}}))
    net = network_config(parse_config(f))
    assert net.feature_size == 8 and net.head_channels == 16


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("0.5") == 0.5 and parse_value("true") is True
    assert parse_value("[1, 2]") == [1, 2] and parse_value("abc") == "abc"


# -- command dispatch ---------------------------------------------------------------


@pytest.fixture
def split_tree(tmp_path):
    return make_tree(tmp_path / "ds", per_class=3, size=16, splits=("training", "validation", "evaluation"))



def test_inspect_total_matches_model(tmp_path):
    out = tmp_path / "inspect"
    assert cli.main(["inspect", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "layers.csv")))
    assert rows[0] == ["name", "kind", "output_shape", "params", "macs"]
    assert rows[-1][0] == "TOTAL"
    cfg = parse_config(None, {})
    assert int(rows[-1][3]) == count_params(build_model(network_config(cfg)))
    assert json.loads((out / "config.json").read_text())["network"]["preset"] == "efftiny"


def test_train_one_epoch(split_tree, tmp_path):
    out = tmp_path / "run"
    code = cli.main(["train", "--root", str(split_tree), "--out", str(out), "--epochs", "1",
                     "--set", "network.resolution=16"])
    assert code == 0
    rows = list(csv.DictReader(open(out / "history.csv")))
    assert len(rows) == 1
    assert (out / "best.ckpt").exists()
    assert json.loads((out / "run_result.json").read_text())["steps"] == 1


def test_evaluate_memorized_fixture(split_tree, tmp_path):
    out = tmp_path / "mem"
    common = ["--root", str(split_tree), "--set", "network.resolution=16", "--set", "augment.enabled=false"]
    assert cli.main(["train", "--out", str(out), "--epochs", "8", "--set", "batch.train=2", *common]) == 0
    ev = tmp_path / "ev"
    assert cli.main(["evaluate", "--out", str(ev), "--checkpoint", str(out / "best.ckpt"),
                     "--set", "eval.split=training", *common]) == 0
    result = json.loads((ev / "eval.json").read_text())
    assert result["accuracy"] == 1.0
    assert (ev / "confusion.csv").exists() and (ev / "confusion.pgm").exists()
    assert result["class_names"][:2] == ["a", "b"] and len(result["class_names"]) == 11
    assert load_checkpoint(out / "best.ckpt").meta["class_names"] == ["a", "b"]


def test_bench_and_stats_and_preview(split_tree, tmp_path):
    assert cli.main(["bench", "--out", str(tmp_path / "b"), "--set", "bench.batch_size=2",
                     "--set", "bench.timed=2", "--set", "bench.warmup=1"]) == 0
    rep = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert rep["images_per_second"] == pytest.approx(rep["batches_per_second"] * 2)

    assert cli.main(["dataset-stats", "--root", str(split_tree), "--out", str(tmp_path / "s")]) == 0
    rows = list(csv.reader(open(tmp_path / "s" / "dataset_stats.csv")))
    assert ["training", "a", "3"] in rows and ["evaluation", "TOTAL", "6"] in rows

    assert cli.main(["augment-preview", "--root", str(split_tree), "--out", str(tmp_path / "p"),
                     "--set", "preview.count=3", "--set", "network.resolution=16"]) == 0
    assert sorted(p.name for p in (tmp_path / "p").glob("*.ppm")) == [f"preview_{i:03d}.ppm" for i in range(3)]


def test_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["inspect", "--out", str(tmp_path), "--set", "batch.train=0"]) == 2
    assert "batch.train" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    assert cli.main(["evaluate", "--out", str(tmp_path), "--root", str(tmp_path / "missing"),
                     "--checkpoint", str(tmp_path / "none.ckpt")]) == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_missing_root(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path)]) == 2
    assert "data.root" in capsys.readouterr().err
