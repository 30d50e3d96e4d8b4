import json

import pytest

from ltekge import grad_equivalence
from ltekge.cli import main
from ltekge.synthetic import symmetric_toy_kg, write_dataset

from conftest import write_tsv

FAST = ["--dim", "16", "--epochs", "3", "--set", "batch_size=64"]


@pytest.fixture(scope="module")
def small_dir(tmp_path_factory):
    ds = symmetric_toy_kg(20, noise_relations=1, noise_triples=10)
    return write_dataset(ds, tmp_path_factory.mktemp("small"))


def read(path):
    return json.loads(path.read_text())


def test_prepare_counts(small_dir, capsys):
    assert main(["prepare", str(small_dir)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["entities"] == 20 and out["relations"] == 2
    assert set(out["checksums"]) == {"train.txt", "valid.txt", "test.txt"}


def test_prepare_missing_files(tmp_path, capsys):
    write_tsv(tmp_path / "train.txt", [("a", "r", "b")])
    assert main(["prepare", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "valid.txt" in err and "test.txt" in err


def test_prepare_malformed_line(tmp_path, capsys):
    for name in ("train", "valid", "test"):
        write_tsv(tmp_path / f"{name}.txt", [("a", "r", "b")])
    (tmp_path / "train.txt").write_text("a\tr\n", encoding="utf-8")
    assert main(["prepare", str(tmp_path)]) == 2


def test_train_writes_run(small_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(small_dir), "--out", str(out), *FAST]) == 0
    manifest = read(out / "manifest.json")
    for key in ("run_id", "config", "dataset", "seeds", "checkpoint", "checkpoint_sha256", "timing"):
        assert key in manifest
    assert (out / "checkpoint.ltek").read_bytes()[:4] == b"LTEK"
    metrics = read(out / "metrics.json")
    assert len(metrics["losses"]) == 3


def test_train_bitwise_reproducible(small_dir, tmp_path):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["train", "--data", str(small_dir), "--out", str(out), "--encoder", "compgcn",
                "--rat", "--seed", "7", *FAST]
        assert main(args) == 0
        blobs.append((out / "checkpoint.ltek").read_bytes())
    assert blobs[0] == blobs[1]


def test_lte_conve_metrics_echo(small_dir, tmp_path):
    out = tmp_path / "lte"
    args = ["train", "--data", str(small_dir), "--out", str(out), "--encoder", "lte",
            "--decoder", "conve", "--set", "g_chain=batchnorm,dropout", "--set", "conve_filters=4",
            *FAST]
    assert main(args) == 0
    metrics = read(out / "metrics.json")
    assert metrics["config_echo"]["encoder"] == "lte"
    assert "graph_seed" in metrics and metrics["valid"]["graph_seed"] == metrics["graph_seed"]


@pytest.fixture(scope="module")
def trained(small_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained") / "run"
    args = ["train", "--data", str(small_dir), "--out", str(out), "--dim", "32", "--epochs", "200",
            "--set", "learning_rate=0.05", "--set", "batch_size=64"]
    assert main(args) == 0
    return out


def test_eval_reproducible_and_memorizes(trained, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", str(trained), "--split", "train", "--out", str(a)]) == 0
    assert main(["eval", str(trained), "--split", "train", "--out", str(b)]) == 0
    ra, rb = read(a), read(b)
    for key in ("mr", "mrr", "hits"):
        assert ra[key] == rb[key]
    assert ra["mrr"] > 0.95


def test_eval_corrupted_checkpoint(trained, tmp_path):
    import shutil
    run = tmp_path / "copy"
    shutil.copytree(trained, run)
    blob = bytearray((run / "checkpoint.ltek").read_bytes())
    blob[:4] = b"XXXX"
    (run / "checkpoint.ltek").write_bytes(bytes(blob))
    assert main(["eval", str(run)]) == 2


def test_eval_dimension_mismatch(trained, tmp_path, capsys):
    import shutil
    run = tmp_path / "copy"
    shutil.copytree(trained, run)
    manifest = read(run / "manifest.json")
    manifest["config"]["dim"] = 16
    (run / "manifest.json").write_text(json.dumps(manifest))
    assert main(["eval", str(run)]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_eval_changed_dataset(small_dir, tmp_path):
    import shutil
    data = tmp_path / "data"
    shutil.copytree(small_dir, data)
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *FAST]) == 0
    with open(data / "test.txt", "a", encoding="utf-8") as fh:
        fh.write("e0\tsym\te1\n")
    assert main(["eval", str(out)]) == 2


def test_gradcheck_default(tmp_path):
    out = tmp_path / "g.json"
    assert main(["gradcheck", "--out", str(out)]) == 0
    payload = read(out)
    assert payload["passed"] and set(payload["formulas"]) == set(grad_equivalence.FORMULAS)


def test_gradcheck_single_formula(capsys):
    assert main(["gradcheck", "--formula", "distmult"]) == 0
    assert list(json.loads(capsys.readouterr().out)["formulas"]) == ["distmult"]


def test_gradcheck_breach_exit_code(monkeypatch):
    good = grad_equivalence.ANALYTIC["transe_l2"]
    monkeypatch.setitem(grad_equivalence.ANALYTIC, "transe_l2",
                        lambda h, r, t, W: 1.01 * good(h, r, t, W))
    assert main(["gradcheck", "--formula", "transe_l2"]) == 3


def test_gradcheck_unknown_formula():
    assert main(["gradcheck", "--formula", "rotate"]) == 1


@pytest.mark.parametrize("extra", [["--wni", "--rat"], ["--wni", "--sample-pool", "3"],
                                   ["--set", "layers=two"], ["--set", "nokey"]])
def test_contradictory_flags(small_dir, tmp_path, extra):
    args = ["train", "--data", str(small_dir), "--out", str(tmp_path / "x"), "--encoder", "rgcn", *extra]
    assert main(args) == 1


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "x")]) == 1
