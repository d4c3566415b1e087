import json

import numpy as np
import pytest

from hiertool import data_path
from hiertool import model as mdl
from hiertool.cli import main

TOY = str(data_path("toy_birds.tsv"))
VEC = str(data_path("vectors_50d.txt"))
SMALL = {"image_size": 16, "width": 16, "heads": 2, "encoder_blocks": 1, "decoder_blocks": 1}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-sources", "--hierarchy", TOY, "--out", str(root / "src"), "--per-leaf", "3",
                 "--size", "24"]) == 0
    assert main(["synth", "--hierarchy", TOY, "--source", str(root / "src"), "--out", str(root / "ds"),
                 "--seed", "7"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    return root


def test_synth_prints_summary_and_is_reproducible(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--hierarchy", TOY, "--source", dataset / "src",
                       "--out", tmp_path / "again", "--seed", 7)
    assert code == 0
    assert out.splitlines()[0].split()[:4] == ["level", "order", "family", "species"]
    a = (dataset / "ds" / "manifest.jsonl").read_bytes()
    assert a == (tmp_path / "again" / "manifest.jsonl").read_bytes()
    assert len(a.splitlines()) == 12


def test_synth_json_output(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--hierarchy", TOY, "--source", dataset / "src",
                       "--out", tmp_path / "j", "--json", "--annotator", "perfect")
    payload = json.loads(out)
    assert code == 0 and payload["records"] == 12
    assert payload["summary"]["total"]["species"] == 12


def test_missing_flag_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "--source", tmp_path, "--out", tmp_path / "o")
    assert code == 2 and "--hierarchy" in err
    assert not (tmp_path / "o").exists()
    assert run(capsys)[0] == 2
    assert run(capsys, "train", "--manifest", "m", "--hierarchy", TOY, "--vectors", VEC,
               "--out", "x", "--epochs", "-1")[0] == 2


def test_runtime_failure_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "--hierarchy", tmp_path / "nope.tsv", "--source", tmp_path,
                       "--out", tmp_path / "o")
    assert code == 1 and "error" in err


def test_summarize(dataset, capsys):
    code, out, _ = run(capsys, "summarize", "--manifest", dataset / "ds" / "manifest.jsonl",
                       "--hierarchy", TOY, "--json")
    assert code == 0 and json.loads(out)["total"]["total"] == 12


def _train(capsys, dataset, out, *extra):
    return run(capsys, "train", "--manifest", dataset / "ds" / "manifest.jsonl", "--hierarchy", TOY,
               "--vectors", VEC, "--config", dataset / "cfg.json", "--out", out, *extra)


def test_zero_epochs_writes_initialization(dataset, tmp_path, capsys):
    code, _, _ = _train(capsys, dataset, tmp_path / "m.ckpt", "--epochs", 0, "--seed", 3)
    assert code == 0
    model, meta = mdl.HierarchyNet.load(tmp_path / "m.ckpt")
    from hiertool.embeddings import build_query_matrix, load_vectors
    from hiertool.hierarchy import load_hierarchy

    h = load_hierarchy(TOY)
    fresh = mdl.HierarchyNet(model.cfg, build_query_matrix(load_vectors(VEC), h), seed=3)
    for name, t in fresh.params.items():
        assert np.array_equal(model.params[name].data, t.data)
    assert (tmp_path / "m.losses.tsv").read_text() == "epoch\tloss\n"


def test_training_bytes_are_seeded(dataset, tmp_path, capsys):
    for name in ("a", "b"):
        assert _train(capsys, dataset, tmp_path / f"{name}.ckpt", "--epochs", 2, "--seed", 5)[0] == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.losses.tsv").read_text() == (tmp_path / "b.losses.tsv").read_text()


def test_overfit_one_flag(dataset, tmp_path, capsys):
    code, out, _ = _train(capsys, dataset, tmp_path / "o.ckpt", "--overfit-one", "--lr", 0.01, "--json")
    payload = json.loads(out)
    assert code == 0 and payload["samples"] == 1 and payload["epochs"] == 200
    assert payload["final_loss"] < 0.1 * payload["initial_loss"]


def test_bad_config_key(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"learning_rate": 1}')
    code, _, err = run(capsys, "train", "--manifest", dataset / "ds" / "manifest.jsonl", "--hierarchy",
                       TOY, "--vectors", VEC, "--config", bad, "--out", tmp_path / "m.ckpt")
    assert code == 1 and "learning_rate" in err


@pytest.fixture(scope="module")
def checkpoint_file(dataset):
    path = dataset / "model.ckpt"
    assert main(["train", "--manifest", str(dataset / "ds" / "manifest.jsonl"), "--hierarchy", TOY,
                 "--vectors", VEC, "--config", str(dataset / "cfg.json"), "--out", str(path),
                 "--epochs", "1"]) == 0
    return path


def test_infer_and_eval(dataset, checkpoint_file, tmp_path, capsys):
    manifest = dataset / "ds" / "manifest.jsonl"
    code, out, _ = run(capsys, "infer", "--checkpoint", checkpoint_file, "--manifest", manifest,
                       "--out", tmp_path / "p1.tsv")
    assert code == 0
    assert run(capsys, "infer", "--checkpoint", checkpoint_file, "--manifest", manifest,
               "--out", tmp_path / "p2.tsv")[0] == 0
    lines = (tmp_path / "p1.tsv").read_text().splitlines()
    assert lines == (tmp_path / "p2.tsv").read_text().splitlines()
    assert len(lines) == 12 and all(len(l.split("\t")[1].split("/")) == 3 for l in lines)
    code, out, _ = run(capsys, "eval", "--hierarchy", TOY, "--truth", manifest, "--pred", tmp_path / "p1.tsv")
    assert code == 0 and out.startswith("n=12  SDL=")


def test_infer_empty_list(checkpoint_file, tmp_path, capsys):
    code, _, _ = run(capsys, "infer", "--checkpoint", checkpoint_file, "--images", "--out", tmp_path / "e.tsv")
    assert code == 0 and (tmp_path / "e.tsv").read_text() == ""


def test_infer_hierarchy_mismatch(checkpoint_file, tmp_path, capsys):
    code, _, err = run(capsys, "infer", "--checkpoint", checkpoint_file, "--hierarchy",
                       data_path("toy21.tsv"), "--images", "--out", tmp_path / "e.tsv")
    assert code == 1 and "error" in err


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def abde(tmp_path):
    return _write(tmp_path / "h.tsv", ["A\t-", "B\tA", "C\tA", "D\tB", "E\tB", "F\tC"])


def test_eval_identical(abde, tmp_path, capsys):
    t = _write(tmp_path / "t.tsv", ["x\tA/B/D", "y\tA/C/None"])
    code, out, _ = run(capsys, "eval", "--hierarchy", abde, "--truth", t, "--pred", t)
    assert code == 0 and out.strip() == "n=2  SDL=0.0000  P_H(%)=100.00  R_H(%)=100.00"


def test_eval_worked_pair_and_report_file(abde, tmp_path, capsys):
    t = _write(tmp_path / "t.tsv", ["img_1\tA/B/D"])
    p = _write(tmp_path / "p.tsv", ["img_1\tA/B/E"])
    code, out, _ = run(capsys, "eval", "--hierarchy", abde, "--truth", t, "--pred", p,
                       "--out", tmp_path / "r.json")
    assert code == 0 and "SDL=2.0000  P_H(%)=66.67  R_H(%)=66.67" in out
    assert json.loads((tmp_path / "r.json").read_text())["sdl"] == 2.0


def test_eval_is_order_independent(abde, tmp_path, capsys):
    t = ["a\tA/B/D", "b\tA/B", "c\tA/C/F", "d\tA"]
    p = ["a\tA/B/E", "b\tA/B/D", "c\tA", "d\tA/C/F"]
    outs = []
    for k, order in enumerate(([0, 1, 2, 3], [3, 1, 0, 2])):
        tp = _write(tmp_path / f"t{k}.tsv", [t[i] for i in order])
        pp = _write(tmp_path / f"p{k}.tsv", [p[i] for i in reversed(order)])
        outs.append(run(capsys, "eval", "--hierarchy", abde, "--truth", tp, "--pred", pp, "--json")[1])
    assert outs[0] == outs[1]


def test_eval_mismatch(abde, tmp_path, capsys):
    t = _write(tmp_path / "t.tsv", ["a\tA"])
    p = _write(tmp_path / "p.tsv", ["b\tA"])
    code, _, err = run(capsys, "eval", "--hierarchy", abde, "--truth", t, "--pred", p)
    assert code == 1 and "mismatch" in err


def test_gradcheck_filter_and_json(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops", "softmax", "--json")
    payload = json.loads(out)
    assert code == 0 and [r["op"] for r in payload["results"]] == ["softmax"]
    assert run(capsys, "gradcheck", "--ops", "bogus")[0] == 2


def test_gradcheck_default_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tol", "1e-4", "--model-tol", "1e-4")
    assert code == 0
    assert len(out.splitlines()) == 10 and all(l.startswith("PASS") for l in out.splitlines())


def test_gradcheck_reports_injected_fault(monkeypatch, capsys):
    from hiertool import autodiff as ad

    original = ad.gelu_backward
    monkeypatch.setattr(ad, "gelu_backward", lambda *a: -original(*a))
    code, out, _ = run(capsys, "gradcheck", "--ops", "gelu,softmax")
    assert code == 1
    assert "FAIL  gelu" in out and "PASS  softmax" in out and "failed: gelu" in out
