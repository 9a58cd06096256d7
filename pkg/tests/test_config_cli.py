import csv
import json

import pytest

from amtc3l import cli
from amtc3l.config import RunConfig, parse_config, parse_text, render_config
from amtc3l.trainer import ConfigError

FAST = ["--n_total", "140", "--epochs", "2", "--batch_size", "32"]


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("")
    assert parse_config(p) == RunConfig()


def test_flag_beats_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nlambda = 0.5\nnss = ms  # trailing\n")
    assert parse_config(p).lam == 0.5
    cfg = parse_config(p, {"lambda": "1.0"})
    assert cfg.lam == 1.0 and cfg.nss == "ms"


def test_pipeline_b_keys():
    cfg = RunConfig(**parse_text("nss = mm\nmargin_mode = adaptive\n"))
    assert (cfg.nss, cfg.margin_mode) == ("mm", "adaptive")


def test_errors_name_key_and_line(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lr = 0.1\n\nbogus = 3\n")
    with pytest.raises(ConfigError, match=r"c.txt:3: unknown key 'bogus'"):
        parse_config(p)
    p.write_text("epochs = many\n")
    with pytest.raises(ConfigError, match="c.txt:1: bad value for 'epochs'"):
        parse_config(p)
    p.write_text("margin_mode = fixed\nfixed_margin = 9\n")
    with pytest.raises(ConfigError, match="fixed_margin"):
        parse_config(p)
    with pytest.raises(ConfigError):
        parse_config(None, {"nss": "zz"})


def test_render_round_trip():
    cfg = RunConfig(lam=0.3, proportions=(0.25, 0.75), k_classes=2, center_lr=0.5)
    assert RunConfig(**parse_text(render_config(cfg))) == cfg


def test_train_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--out", str(out), "--lambda", "0", "--nss", "none", *FAST]) == 0
    for name in ("config.txt", "curve.csv", "metrics.json", "checkpoint.bin", "checkpoint.bin.json",
                 "centers.csv", "confusion.csv"):
        assert (out / name).exists(), name
    m = json.loads((out / "metrics.json").read_text())
    assert set(m) == {"overall_accuracy", "per_class_accuracy", "mean_per_class_accuracy", "confusion",
                      "intra_class_compactness", "inter_class_separation"}
    assert not (out / "stats").exists()


def test_echoed_config_reproduces_run(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "a"), "--nss", "ns", *FAST]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "b")]) == 0
    for name in ("curve.csv", "metrics.json", "checkpoint.bin", "stats/epoch_001.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_grid(tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--out", str(out), "--lambda", "0.05,0.5", "--nss", "ms,ns,mm", *FAST]) == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert len(dirs) == 6 and "nss-mm_lambda-0.5" in dirs
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    for r in rows:
        m = json.loads((out / cli.run_dir_name(r["nss"], float(r["lambda"])) / "metrics.json").read_text())
        assert float(r["overall_acc"]) == m["overall_accuracy"]
        assert float(r["mean_per_class_acc"]) == m["mean_per_class_accuracy"]


def test_single_cell_sweep_equals_train(tmp_path):
    assert cli.main(["sweep", "--out", str(tmp_path / "s"), "--lambda", "0.1", "--nss", "mm", *FAST]) == 0
    assert cli.main(["train", "--out", str(tmp_path / "t"), "--lambda", "0.1", "--nss", "mm", *FAST]) == 0
    run = tmp_path / "s" / "nss-mm_lambda-0.1"
    for name in ("curve.csv", "metrics.json", "checkpoint.bin"):
        assert (run / name).read_bytes() == (tmp_path / "t" / name).read_bytes()


def test_ablation_grid_shape():
    runs = cli.ablation_runs(RunConfig())
    assert len(runs) == 7
    assert runs[0][2].lam == 0 and runs[0][2].nss == "none"
    assert {(p, c.margin_mode) for p, _, c in runs[1:]} == {("pipeline_a", "fixed"), ("pipeline_b", "adaptive")}


def test_gen_data_and_eval(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d.csv"), "--n_total", "70"]) == 0
    before = (tmp_path / "d.csv").read_bytes()
    assert cli.main(["train", "--out", str(tmp_path / "r"), "--data_path", str(tmp_path / "d.csv"), *FAST]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.bin"), "--data", str(tmp_path / "d.csv")]) == 0
    assert "overall_accuracy" in json.loads(capsys.readouterr().out)
    assert (tmp_path / "d.csv").read_bytes() == before


def test_exit_codes(tmp_path):
    assert cli.main(["train"]) == 1
    assert cli.main(["train", "--out", str(tmp_path / "x"), "--bogus", "1"]) == 1
    assert cli.main(["train", "--out", str(tmp_path / "x"), "--nss", "zz"]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["train", "--out", str(blocker / "sub"), *FAST]) == 2
    assert cli.main(["eval", "--checkpoint", str(blocker), "--data", str(blocker)]) == 2
