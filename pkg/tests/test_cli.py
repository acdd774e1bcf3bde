import csv
import json

import numpy as np
import pytest

from phymt.harness.cli import EVAL_HEADER, main
from phymt.harness.config import SEED_ENV, ExperimentConfig, small_config
from phymt.nn.checkpoint import load_model, quantized_storage, read_manifest
from phymt.training.data import TaskData
from phymt.training.train import MetricLog


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    small_config().save(cfg)
    assert main(["--config", str(cfg), "gen-data", "--out", str(root / "data")]) == 0
    assert main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(root / "all.ckpt")]) == 0
    return root, cfg


def test_gen_data_files_and_tags(ws):
    root, _ = ws
    cfg = ExperimentConfig.load(root / "data" / "config.json")
    for t in ("cp", "det", "pre"):
        for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
            d = TaskData.load(root / "data" / f"{t}_{split}.bin")
            assert len(d) == n and d.meta["split"] == split and d.meta["seed"] == cfg.seed
    cp = TaskData.load(root / "data" / "cp_test.bin")
    assert set(np.unique(cp.aux["velocity_kmh"])) == set(cfg.velocities)
    det = TaskData.load(root / "data" / "det_test.bin")
    assert set(np.unique(det.aux["snr_db"])) <= set(cfg.det_snrs)


def test_gen_data_is_bit_identical(ws, tmp_path):
    root, cfg = ws
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path), "--tasks", "cp,det"]) == 0
    for name in ("cp_train.bin", "cp_test.bin", "det_train.bin", "det_test.bin"):
        assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes()


def test_seed_env_override(ws, tmp_path, monkeypatch):
    _, cfg = ws
    monkeypatch.setenv(SEED_ENV, "5")
    assert ExperimentConfig.load(cfg).seed == 5
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path), "--tasks", "cp"]) == 0
    assert TaskData.load(tmp_path / "cp_train.bin").meta["seed"] == 5
    monkeypatch.setenv(SEED_ENV, "five")
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path)]) == 2


def test_train_outputs_are_reproducible(ws, tmp_path):
    root, cfg = ws
    out = tmp_path / "again.ckpt"
    assert main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(out)]) == 0
    assert out.read_bytes() == (root / "all.ckpt").read_bytes()
    assert out.with_suffix(".metrics.csv").read_bytes() == (root / "all.metrics.csv").read_bytes()
    assert "seconds" in json.loads(out.with_suffix(".run.json").read_text())
    log = MetricLog.from_csv(out.with_suffix(".metrics.csv"))
    assert {r["task"] for r in log.select(metric="nmse_db")} == {"CP", "DET"}


def test_single_task_and_no_prompt(ws, tmp_path):
    root, cfg = ws
    out = tmp_path / "det.ckpt"
    assert main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(out),
                 "--single-task", "det", "--no-prompt"]) == 0
    man = read_manifest(out)
    assert man["extra"]["tasks"] == ["DET"] and man["extra"]["train"]["use_prompt"] is False
    assert man["extra"]["train"]["task_weights"] == {"CP": 0.0, "DET": 1.0, "PRE": 0.0}
    for ck in (out, root / "all.ckpt"):
        ev = tmp_path / ck.stem
        assert main(["--config", str(cfg), "eval", "--checkpoint", str(ck), "--data", str(root / "data"),
                     "--out", str(ev)]) == 0
        assert any(r["method"] == "model" for r in _rows(ev / "det_snr.csv"))


def test_quantized_training(ws, tmp_path):
    root, cfg = ws
    out = tmp_path / "q.ckpt"
    assert main(["--config", str(cfg), "train", "--data", str(root / "data"), "--out", str(out),
                 "--quantize", "loftq", "--steps", "5"]) == 0
    man = read_manifest(out)
    assert man["quantized"] and all(q["bits"] == 4 for q in man["quantized"])
    model, _ = load_model(out)
    assert quantized_storage(model)["ratio"] == 0.25


@pytest.fixture(scope="module")
def evald(ws):
    root, cfg = ws
    out = root / "eval"
    assert main(["--config", str(cfg), "eval", "--checkpoint", str(root / "all.ckpt"),
                 "--data", str(root / "data"), "--out", str(out)]) == 0
    return out, ExperimentConfig.load(cfg)


def test_eval_headers_and_row_counts(evald):
    out, cfg = evald
    for name in ("cp_velocity", "det_snr", "pre_snr"):
        head = (out / f"{name}.csv").read_text().splitlines()[0]
        assert head == "figure,method,grid,grid_value,metric,value,n" == ",".join(EVAL_HEADER)
        svg = (out / f"{name}.svg").read_text()
        assert "<svg" in svg and "<!-- data" in svg
    cp = _rows(out / "cp_velocity.csv")
    assert len(cp) == len(cfg.velocities) * 2
    assert {r["method"] for r in cp} == {"model", "AR(2)"}


def test_eval_baseline_oracles(evald):
    out, _ = evald
    pre = _rows(out / "pre_snr.csv")
    wm = [float(r["value"]) for r in pre if r["method"] == "WMMSE" and r["metric"] == "rate_ratio"]
    assert wm and all(v == 1.0 for v in wm)
    det = _rows(out / "det_snr.csv")
    ser = {(r["method"], r["grid_value"]): float(r["value"]) for r in det if r["metric"] == "ser"}
    snrs = {g for m, g in ser if m == "ML"}
    assert snrs
    for g in snrs:
        assert ser[("ML", g)] <= ser[("LMMSE", g)]


def test_eval_is_idempotent(ws, evald, tmp_path):
    root, cfg = ws
    out, _ = evald
    assert main(["--config", str(cfg), "eval", "--checkpoint", str(root / "all.ckpt"),
                 "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    for name in ("cp_velocity.csv", "det_snr.csv", "pre_snr.csv", "det_snr.svg"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_quantize_demo(tmp_path, capsys):
    out = tmp_path / "q.csv"
    assert main(["quantize-demo", "--seeds", "3", "--out", str(out)]) == 0
    assert "loftq_wins\t3/3" in capsys.readouterr().out
    rows = _rows(out)
    assert list(rows[0]) == ["seed", "iter", "pre_svd_error", "error", "best_error", "naive_error"]
    assert len(rows) == 3 * 5
    for s in range(3):
        best = [float(r["best_error"]) for r in rows if r["seed"] == str(s)]
        assert all(b <= a for a, b in zip(best, best[1:]))
        assert best[-1] < float(rows[5 * s]["naive_error"])
    full = tmp_path / "full.csv"
    assert main(["quantize-demo", "--seeds", "1", "--rank", "64", "--iters", "1", "--out", str(full)]) == 0
    assert float(_rows(full)[0]["error"]) < 1e-9


def test_exit_codes(ws, tmp_path):
    root, cfg = ws
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1, "bogus": 2}')
    assert main(["--config", str(bad), "gen-data", "--out", str(tmp_path)]) == 2
    assert main(["--config", str(cfg), "train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "x")]) == 2
    mismatch = small_config()
    mismatch.model.n_users = 2
    mismatch.save(tmp_path / "mm.json")
    assert main(["--config", str(tmp_path / "mm.json"), "train", "--data", str(root / "data"),
                 "--out", str(tmp_path / "x.ckpt")]) == 2
    huge = json.loads(cfg.read_text())
    huge["train"]["lr"] = 1e200
    (tmp_path / "huge.json").write_text(json.dumps(huge))
    with np.errstate(all="ignore"):
        code = main(["--config", str(tmp_path / "huge.json"), "train", "--data", str(root / "data"),
                     "--out", str(tmp_path / "h.ckpt"), "--steps", "5"])
    assert code == 3


def test_bench_runs(ws, capsys):
    _, cfg = ws
    assert main(["--config", str(cfg), "bench", "--batch", "2", "--reps", "1"]) == 0
    assert "wmmse_ms" in capsys.readouterr().out
