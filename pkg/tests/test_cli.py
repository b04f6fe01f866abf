import csv
import json
import struct

import numpy as np
import pytest

from allinone import cli, dvfs, store

from conftest import random_state


def _write_mnist(root, seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for split, n, (img, lab) in (("train", 96, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
                                 ("test", 48, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        pix = rng.integers(0, 40, (n, 28, 28)).astype(np.uint8)
        for i, y in enumerate(labels):
            pix[i, 2 * y + 3:2 * y + 6, 4:24] = 255
        (root / img).write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + pix.tobytes())
        (root / lab).write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    _write_mnist(base / "data" / "mnist")
    cfg = {"train": {"targets": [0.8], "warmup_epochs": 1, "epochs": 1, "batch_size": 32,
                     "lr_weights": 0.05, "lr_scores": 2.0},
           "data": {"root": str(base / "data")}, "plots": True}
    (base / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(base / "cfg.json"), "--out", str(base / "run")]) == 0
    return base


def test_train_outputs(trained):
    run = trained / "run"
    for name in ("train_log.csv", "eval_log.csv", "checkpoint.npz", "model.aio", "summary.json"):
        assert (run / name).exists(), name
    with open(run / "train_log.csv") as fh:
        assert tuple(next(csv.reader(fh))) == cli.TRAIN_LOG_COLUMNS
    with open(run / "eval_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == cli.EVAL_LOG_COLUMNS and rows[-1]["epoch"] == "final"
    model = store.load(run / "model.aio")
    assert model.n_switches == 1


def test_eval_matches_training_summary(trained):
    run = trained / "run"
    assert cli.main(["eval", str(run / "model.aio"), "--config", str(trained / "cfg.json"),
                     "--out", str(trained / "ev")]) == 0
    with open(trained / "ev" / "eval.csv") as fh:
        row = next(csv.DictReader(fh))
    summary = json.loads((run / "summary.json").read_text())["switches"][0]
    assert float(row["accuracy"]) == pytest.approx(summary["accuracy"], abs=1e-6)
    assert int(row["macs"]) == summary["macs"]


def test_export_reproduces_model(trained):
    run = trained / "run"
    assert cli.main(["export", str(run / "checkpoint.npz"), "--out", str(trained / "ex")]) == 0
    assert (trained / "ex" / "model.aio").read_bytes() == (run / "model.aio").read_bytes()


def test_bench_and_inspect(trained, capsys):
    run = trained / "run"
    assert cli.main(["bench", str(run / "model.aio"), "--out", str(trained / "b")]) == 0
    assert (trained / "b" / "bench.csv").read_text().startswith("switch,repetitions,median_ns,macs")
    assert cli.main(["inspect", str(run / "model.aio"), "--out", str(trained / "i")]) == 0
    assert cli.main(["inspect", "--arch", "resnet18", "--out", str(trained / "i2")]) == 0
    assert "saving" in (trained / "i2" / "memory.csv").read_text()


def test_simulate_reproduces_variances(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "table_n3.csv") as fh:
        rows = list(csv.DictReader(fh))
    printed = [r["variance"] for r in dvfs.latency_tables()["n3"]["rows"]]
    assert all(abs(float(r["variance"]) - p) <= 0.005 + 1e-9 for r, p in zip(rows, printed))
    cal = json.loads((tmp_path / "calibration.json").read_text())
    assert cal["t0_ms"] == pytest.approx(10.18, abs=0.01)
    assert "all-in-one" in capsys.readouterr().out


def test_simulate_with_trace(tmp_path):
    dvfs.write_trace(dvfs.battery_trace([305, 442, 587], 3), tmp_path / "trace.csv")
    assert cli.main(["simulate", "--trace", str(tmp_path / "trace.csv"), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "policy_latency.csv").read_text().splitlines()
    assert len(lines) == 1 + 5 * 9


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"train": {"nope": 1}}))
    assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert cli.main(["eval", str(tmp_path / "missing.aio"), "--out", str(tmp_path)]) == 3
    (tmp_path / "junk.aio").write_bytes(b"JUNKJUNKJUNK")
    assert cli.main(["bench", str(tmp_path / "junk.aio"), "--out", str(tmp_path)]) == 3
    empty = tmp_path / "empty"
    empty.mkdir()
    (tmp_path / "nodata.json").write_text(json.dumps({"data": {"root": str(empty)}}))
    assert cli.main(["train", "--config", str(tmp_path / "nodata.json"), "--out", str(tmp_path / "r")]) == 3
    assert "error" in capsys.readouterr().err


def test_eval_single_switch(tmp_path):
    _write_mnist(tmp_path / "data" / "mnist")
    model = store.from_state(random_state("lenet", "pattern", 3, seed=1))
    store.save(model, tmp_path / "m.aio")
    (tmp_path / "c.json").write_text(json.dumps({"data": {"root": str(tmp_path / "data")}}))
    assert cli.main(["eval", str(tmp_path / "m.aio"), "--switch", "2", "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "eval.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("2,")
    assert cli.main(["eval", str(tmp_path / "m.aio"), "--switch", "9", "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "o")]) == 2
