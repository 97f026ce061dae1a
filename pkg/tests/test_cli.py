import json
import os

import pytest

from ranklab import cli
from ranklab.attacks import read_trials_csv

SMALL = ["--dataset", "synth", "--arch", "mlp", "--dim", "8", "--set", "synth_hw=8", "--set", "synth_per_class=24",
         "--set", "train_per_class=12", "--seed", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", *SMALL, "--epochs", 3, "--batch-size", 16, "--out", out) == 0
    return out


def test_train_outputs(trained):
    names = set(os.listdir(trained))
    assert {"model.ckpt", "epoch001.ckpt", "epoch003.ckpt", "history.csv", "config.txt"} <= names
    assert run("verify", trained) == 0


def test_train_rerun_is_byte_identical(trained, tmp_path):
    assert run("train", *SMALL, "--epochs", 3, "--batch-size", 16, "--out", tmp_path) == 0
    for name in ("history.csv", "model.ckpt", "config.txt"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_defense_name_case_insensitive(tmp_path):
    assert run("train", *SMALL, "--defense", "act", "--epochs", 1, "--batch-size", 16, "--set", "inner_eta=2",
               "--out", tmp_path) == 0
    assert "defense = ACT" in (tmp_path / "config.txt").read_text()


def test_attack_and_determinism(trained, tmp_path, capsys):
    args = ["attack", *SMALL, "--checkpoint", trained / "model.ckpt", "--attack", "QA-", "--eta", 4, "--trials", 10]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b", "--jobs", 2) == 0
    a = (tmp_path / "a" / "attack_QAminus.csv").read_bytes()
    assert a == (tmp_path / "b" / "attack_QAminus.csv").read_bytes()
    rows = read_trials_csv(tmp_path / "a" / "attack_QAminus.csv")
    assert len(rows) == 10 and rows[0]["attack"] == "QA-"
    assert run("verify", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "c", "--wall-time") == 0
    assert "wall_time" in read_trials_csv(tmp_path / "c" / "attack_QAminus.csv")[0]


def test_ers_outputs_and_determinism(trained, tmp_path, capsys):
    args = ["ers", *SMALL, "--checkpoint", trained / "model.ckpt", "--eta", 3, "--trials", 8]
    assert run(*args, "--out", tmp_path / "a") == 0
    table = capsys.readouterr().out
    head = [ln for ln in table.splitlines() if not ln.startswith("#")][0].split()
    assert head == ["R@1", "R@2", "mAP", "NMI", "CA+", "CA-", "QA+", "QA-", "TMA", "ES:D", "ES:R", "LTM",
                    "GTM", "GTT", "ERS"]
    assert run(*args, "--out", tmp_path / "b") == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert "report.json" in names and "trials_ESD.csv" not in names and "trials_ES.csv" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["provenance"]["config_hash"] == cli.config_hash(cli.resolve(cli.build_parser().parse_args(
        [str(a) for a in args] + ["--out", str(tmp_path / "a")])))
    assert run("verify", tmp_path / "a") == 0


def test_ers_null_budget(trained, tmp_path):
    assert run("ers", *SMALL, "--checkpoint", trained / "model.ckpt", "--eps", 0, "--eta", 2, "--trials", 8,
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["normalized"]["ES:D"] == 100.0 and rep["normalized"]["GTT"] == 100.0


def test_export(trained, tmp_path):
    from ranklab.ranking import read_embeddings_csv
    assert run("export-embeddings", *SMALL, "--checkpoint", trained / "model.ckpt", "--out", tmp_path) == 0
    index = read_embeddings_csv(tmp_path / "embeddings.csv")
    assert index.embeddings.shape == (48, 8) and len(index.labels) == 48


def test_verify_detects_tampering(trained, tmp_path):
    import shutil
    shutil.copytree(trained, tmp_path / "t")
    snap = tmp_path / "t" / "config.txt"
    snap.write_text(snap.read_text().replace("epochs = 3", "epochs = 4"))
    assert run("verify", tmp_path / "t") == 2


def test_exit_codes(trained, tmp_path):
    assert run("attack", *SMALL, "--checkpoint", tmp_path / "missing.ckpt", "--out", tmp_path) == 2
    assert run("train", "--dataset", "idx", "--images", tmp_path / "nope", "--labels", tmp_path / "nope2",
               "--out", tmp_path) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((trained / "model.ckpt").read_bytes()[:100])
    assert run("attack", *SMALL, "--checkpoint", bad, "--out", tmp_path) == 3
    assert run("attack", *[a if a != "8" else "16" for a in SMALL], "--checkpoint", trained / "model.ckpt",
               "--out", tmp_path) == 2
    cfg = tmp_path / "c.txt"
    cfg.write_text("no_such_key = 1\n")
    assert run("train", "--config", cfg, "--out", tmp_path) == 2
    cfg.write_text("epochs = many\n")
    assert run("train", "--config", cfg, "--out", tmp_path) == 2
    with pytest.raises(SystemExit) as info:
        run("train", "--defense", "bogus")
    assert info.value.code == 2


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nepochs = 5\nlr = 0.01  # trailing\n")
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--set", "epochs=6", "--epochs", "7"])
    resolved = cli.resolve(args)
    assert resolved["epochs"] == 7 and resolved["lr"] == 0.01
    a = dict(resolved, out="x", jobs=4)
    assert cli.config_hash(a) == cli.config_hash(resolved)
    assert cli.config_hash(dict(resolved, seed=9)) != cli.config_hash(resolved)
