import hashlib
import json
import shutil
import subprocess

import numpy as np
import pytest

from okd_forge import cli, dosco, nets
from okd_forge.harness import RunRecord

SMALL = {"samples_per_cell": 6, "image_side": 16, "motif_size": [6, 10]}


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps(SMALL))
    assert run("synth", "--config", root / "synth.json", "--seed", 3, "--out", root / "data") == 0
    return root


def test_help_lists_subcommands():
    out = subprocess.run(["okd-forge", "--help"], capture_output=True, text=True, check=True).stdout
    for name in ("synth", "dosco", "train", "eval", "compare"):
        assert name in out


@pytest.mark.parametrize("cmd,flags", [
    ("train", ["--method", "--aug", "--teacher", "--seeds", "--epochs", "--out"]),
    ("dosco", ["--features", "--k", "--two-k", "--normalize"]),
    ("eval", ["--checkpoint", "--data"]),
])
def test_subcommand_help_lists_flags(cmd, flags, capsys):
    with pytest.raises(SystemExit) as info:
        run(cmd, "--help")
    assert info.value.code == 0
    out = capsys.readouterr().out
    for f in flags:
        assert f in out


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        run("train", "--data", "x")
    assert info.value.code == 2


def test_synth_is_deterministic(dataset, tmp_path):
    assert run("synth", "--config", dataset / "synth.json", "--seed", 3, "--out", tmp_path / "again") == 0
    assert digest(tmp_path / "again") == digest(dataset / "data")
    assert run("synth", "--config", dataset / "synth.json", "--seed", 4, "--out", tmp_path / "other") == 0
    assert digest(tmp_path / "other") != digest(dataset / "data")


def test_synth_rejects_single_domain(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({**SMALL, "num_domains": 1}))
    assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path / "d") == 1
    assert "num_domains" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_synth_rejects_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"num_clases": 3}))
    assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path / "d") == 1
    assert "num_clases" in capsys.readouterr().err


def test_dosco_two_k(tmp_path):
    g = np.random.default_rng(0)
    n_cls, per = 10, 600
    labels = np.repeat(np.arange(n_cls), per)
    feats = g.normal(size=(n_cls * per, 6)) + g.integers(0, 5, size=(n_cls * per, 1))
    table = dosco.FeatureTable(ids=[f"f{i}" for i in range(len(labels))], class_labels=labels, features=feats)
    table.save(tmp_path / "features.json")
    assert run("dosco", "--features", tmp_path / "features.json", "--k", 4, "--seed", 2, "--two-k",
               "--out", tmp_path / "split.csv") == 0
    split = dosco.DomainSplit.load_csv(tmp_path / "split.csv")
    assert (split.count("train"), split.count("val")) == (1600, 400)
    full = dosco.build_domain_splits(table, 4, 2)
    assert split.count("test") == full.count("test")


def test_train_seed_sweep_and_compare(dataset, tmp_path, capsys):
    data = dataset / "data"
    assert run("train", "--data", data, "--method", "erm", "--epochs", 1, "--seeds", "0..4", "--out", tmp_path / "erm") == 0
    records = sorted((tmp_path / "erm").glob("*.json"))
    assert [p.stem for p in records] == ["0", "1", "2", "3", "4"]
    assert len({RunRecord.load(p).to_json(include_wall_clock=False) for p in records}) == 5
    assert run("train", "--data", data, "--method", "okd", "--aug", "identity", "--epochs", 1, "--seed", 0,
               "--out", tmp_path / "okd") == 0
    rec = RunRecord.load(tmp_path / "okd" / "0.json")
    assert rec.config["aug"]["kind"] == "identity"
    assert (tmp_path / "okd" / "0" / "teacher_ckpt").is_dir()
    capsys.readouterr()
    assert run("compare", str(tmp_path / "*" / "*.json"), "--csv", tmp_path / "table.csv") == 0
    out = capsys.readouterr().out
    assert "erm" in out and "okd[identity]" in out
    assert (tmp_path / "table.csv").read_text().count("\n") == 3


def test_train_reuses_teacher_checkpoint(dataset, tmp_path):
    data = dataset / "data"
    assert run("train", "--data", data, "--method", "teacher", "--epochs", 1, "--out", tmp_path / "t") == 0
    ckpt = tmp_path / "t" / "0" / "ckpt"
    before = digest(ckpt)
    assert run("train", "--data", data, "--method", "kd", "--teacher", ckpt, "--epochs", 1, "--out", tmp_path / "kd") == 0
    assert RunRecord.load(tmp_path / "kd" / "0.json").config["teacher_checkpoint"] == str(ckpt)
    assert not (tmp_path / "kd" / "0" / "teacher_ckpt").exists()
    assert digest(ckpt) == before


def test_eval_zero_model_predicts_first_class(dataset, tmp_path, capsys):
    data, _ = dosco.load_dataset(dataset / "data")
    net = nets.build(nets.preset("student2d", data.num_classes, data.input_shape))
    net.load_state({k: np.zeros_like(v) for k, v in net.state().items()})
    nets.save_checkpoint(net, tmp_path / "zero")
    capsys.readouterr()
    assert run("eval", "--checkpoint", tmp_path / "zero", "--data", dataset / "data") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["accuracy"] == np.mean(data.labels == 0)
    assert report["n"] == len(data)


def test_eval_rejects_class_mismatch(dataset, tmp_path, capsys):
    data, _ = dosco.load_dataset(dataset / "data")
    net = nets.build(nets.preset("student2d", data.num_classes + 1, data.input_shape))
    nets.save_checkpoint(net, tmp_path / "wrong")
    assert run("eval", "--checkpoint", tmp_path / "wrong", "--data", dataset / "data") == 1
    assert "classes" in capsys.readouterr().err


def test_train_non_finite_exit_code(dataset, tmp_path):
    data, split = dosco.load_dataset(dataset / "data")
    bad = dosco.LabeledDataset(data.ids, data.x * 1e305, data.labels, data.num_classes)
    dosco.save_dataset(tmp_path / "bad", bad, split)
    with np.errstate(all="ignore"):
        code = run("train", "--data", tmp_path / "bad", "--method", "erm", "--epochs", 1, "--out", tmp_path / "r")
    assert code == 3
    assert RunRecord.load(tmp_path / "r" / "0.json").status == "non_finite_loss"


def test_missing_dataset_is_an_error(tmp_path, capsys):
    assert run("eval", "--checkpoint", tmp_path / "nope", "--data", tmp_path / "nothing") == 1
    assert "error" in capsys.readouterr().err


def test_console_script_available():
    assert shutil.which("okd-forge")


def test_missing_run_record_is_an_error(tmp_path, capsys):
    (tmp_path / "0.json").write_text("{not json")
    assert run("compare", tmp_path / "0.json") == 1
    assert run("compare", tmp_path / "none*.json") == 1
