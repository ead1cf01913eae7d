import json

import numpy as np
import pytest

from onepass.cli import EXIT_DATA, EXIT_ORACLE, EXIT_USAGE, main
from onepass.data import load_csv
from onepass.metrics import accuracy_f1, read_histogram
from onepass.network import load_model, validate_model


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--seed", "4", "--classes", "3", "--n-per-class", "30",
                 "--n-test-per-class", "10", "--shape", "8,8,1", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out-model", str(root / "m.json"),
                 "--epochs", "20", "--filters", "4,4", "--seed", "4"]) == 0
    return root


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_gen_data_files_and_determinism(workdir, tmp_path, capsys):
    names = sorted(p.name for p in (workdir / "data").iterdir())
    assert names == ["meta.json", "ood.csv", "test.csv", "train.csv"]
    code, _ = run(["gen-data", "--seed", "4", "--classes", "3", "--n-per-class", "30",
                   "--n-test-per-class", "10", "--shape", "8,8,1", "--out", tmp_path], capsys)
    assert code == 0
    for name in ("train.csv", "test.csv", "ood.csv"):
        assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()


def test_seed_env_fallback(tmp_path, monkeypatch, workdir, capsys):
    monkeypatch.setenv("ONEPASS_SEED", "4")
    run(["gen-data", "--classes", "3", "--n-per-class", "30", "--n-test-per-class", "10",
         "--shape", "8,8,1", "--out", tmp_path], capsys)
    assert (tmp_path / "test.csv").read_bytes() == (workdir / "data" / "test.csv").read_bytes()
    monkeypatch.setenv("ONEPASS_SEED", "abc")
    code, _ = run(["gen-data", "--out", tmp_path / "x"], capsys)
    assert code == EXIT_USAGE


def test_train_output_is_valid_and_reproducible(workdir, tmp_path, capsys):
    code, out = run(["train", "--data", workdir / "data", "--out-model", tmp_path / "m.json",
                     "--epochs", "20", "--filters", "4,4", "--seed", "4"], capsys)
    assert code == 0
    assert (tmp_path / "m.json").read_text() == (workdir / "m.json").read_text()
    model = validate_model(load_model(tmp_path / "m.json"))
    printed = float(out.out.split("train accuracy")[1])
    train = load_csv(workdir / "data" / "train.csv", model.input_shape, 3)
    from onepass.network import forward_deterministic
    preds = [int(np.argmax(forward_deterministic(model, x))) for x in train.inputs]
    assert printed == pytest.approx(accuracy_f1(preds, train.labels)[0], abs=1e-6)


@pytest.mark.parametrize("method", ["moments", "det", "mcdrop"])
def test_infer_writes_json_lines(workdir, tmp_path, method, capsys):
    out = tmp_path / "o.jsonl"
    argv = ["infer", "--model", workdir / "m.json", "--input-csv", workdir / "data" / "ood.csv",
            "--method", method, "--T", "5", "--seed", "1", "--out", out]
    assert run(argv, capsys)[0] == 0
    first = out.read_text()
    rows = [json.loads(line) for line in first.splitlines()]
    assert len(rows) == 30
    assert set(rows[0]) == {"predicted", "confidence", "entropy", "probs"}
    assert run(argv, capsys)[0] == 0
    assert out.read_text() == first


def test_infer_to_stdout(workdir, capsys):
    code, out = run(["infer", "--model", workdir / "m.json", "--input-csv",
                     workdir / "data" / "test.csv", "--method", "det"], capsys)
    assert code == 0 and len(out.out.splitlines()) == 30


def test_eval_report_histogram_and_parallel(workdir, tmp_path, capsys):
    base = ["eval", "--model", workdir / "m.json", "--data", workdir / "data" / "test.csv",
            "--seed", "2"]
    assert run(base + ["--out", tmp_path / "a.json", "--hist-out", tmp_path / "h.csv"], capsys)[0] == 0
    assert run(base + ["--out", tmp_path / "b.json", "--parallel", "2"], capsys)[0] == 0
    report = json.loads((tmp_path / "a.json").read_text())
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert report["n"] == 30
    assert len(read_histogram(tmp_path / "h.csv")) == 30


def test_eval_rejects_unlabeled_rows(workdir, capsys):
    code, out = run(["eval", "--model", workdir / "m.json", "--data",
                     workdir / "data" / "ood.csv"], capsys)
    assert code == EXIT_DATA and "labeled" in out.err


def test_bench_report(workdir, tmp_path, capsys):
    code, _ = run(["bench", "--model", workdir / "m.json", "--method-set",
                   "ours,deterministic,mcdrop-3", "--iters", "30", "--warmup", "5",
                   "--out", tmp_path / "b.json"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "b.json").read_text())
    medians = {k: v["median_ms"] for k, v in report["methods"].items()}
    assert report["ratios"]["ours/deterministic"] == pytest.approx(
        medians["ours"] / medians["deterministic"])
    assert all(v["iterations"] == 30 for v in report["methods"].values())


@pytest.mark.parametrize(
    "argv",
    [["bench", "--model", "m.json", "--iters", "10"],
     ["bench", "--model", "m.json", "--method-set", "ours,fast"],
     ["oracle-check", "--suite", "unknown"],
     ["gen-data", "--classes", "1", "--out", "x"],
     ["infer", "--model", "m.json"],
     ["frobnicate"]],
)
def test_usage_errors(argv, capsys):
    assert run(argv, capsys)[0] == EXIT_USAGE


def test_data_errors(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1,2\n")
    code, out = run(["infer", "--model", workdir / "m.json", "--input-csv", bad], capsys)
    assert code == EXIT_DATA and "line 1" in out.err
    code, _ = run(["infer", "--model", tmp_path / "missing.json", "--input-csv", bad], capsys)
    assert code == EXIT_DATA


def test_oracle_check(capsys):
    code, out = run(["oracle-check", "--suite", "quadrature"], capsys)
    assert code == 0 and out.out.startswith("PASS quadrature")
    code, out = run(["oracle-check", "--suite", "enum", "--perturb", "1e-3"], capsys)
    assert code == EXIT_ORACLE and out.out.startswith("FAIL enum")
