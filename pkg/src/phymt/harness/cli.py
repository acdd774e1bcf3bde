"""``phymt`` command line: gen-data, train, eval, quantize-demo, bench.

Exit codes: 0 on success, 2 on validation or I/O errors, 3 on numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from ..detection import hard_demod, lmmse_detect, ml_detect, qam
from ..errors import NumericalFailure, ValidationError
from ..lora import QUANT_MODES, attach_adapters, loftq_init
from ..nn.checkpoint import load_model, quantized_storage, save_model
from ..nn.model import TASKS, Backbone, MultiTaskModel
from ..numerics import SeededRng, svd
from ..precoding import wmmse_precoder
from ..prediction import ar_predict
from ..training.data import TaskData, make_task_data
from ..training.train import (TrainConfig, Trainer, evaluate, model_predictor,
                              pretrain_backbone)
from .config import ExperimentConfig
from .plots import line_plot, series_from_rows

EVAL_HEADER = ("figure", "method", "grid", "grid_value", "metric", "value", "n")


# ---------------------------------------------------------------- helpers

def _data_path(root, task: str, split: str) -> Path:
    return Path(root) / f"{task.lower()}_{split}.bin"


def _load_split(root, task: str, split: str) -> TaskData:
    path = _data_path(root, task, split)
    if not path.exists():
        raise ValidationError(f"missing dataset {path}; run gen-data first")
    return TaskData.load(path)


def _parse_tasks(text: str) -> list[str]:
    if text.lower() == "all":
        return list(TASKS)
    tasks = [t.strip().upper() for t in text.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise ValidationError(f"unknown tasks {bad or text!r}; choose from {TASKS}")
    return tasks


def check_compatible(data: TaskData, cfg: ExperimentConfig):
    """Raise if a dataset does not fit the model configuration."""
    m = cfg.model
    expect = {
        "CP": [(m.t1, 2 * m.n_subcarriers)],
        "DET": [(m.n_users, 2 * m.n_t), (m.n_slots, 2 * m.n_t)],
        "PRE": [(m.n_users, 2 * m.n_t)],
    }[data.task]
    got = [tuple(x.shape[1:]) for x in data.inputs]
    if got != expect:
        raise ValidationError(f"{data.task} dataset inputs {got} do not match the model config {expect}")


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _row(figure, method, grid, value, metric, v, n):
    return {"figure": figure, "method": method, "grid": grid, "grid_value": float(value),
            "metric": metric, "value": float(v), "n": int(n)}


def _nmse_db(err, ref):
    return max(10 * np.log10(err / ref), -300.0) if err > 0 else -300.0


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task in _parse_tasks(args.tasks):
        for split, n, offset in (("train", cfg.n_train, 1), ("test", cfg.n_test, 2)):
            kw = {}
            if task == "CP" and split == "test":
                kw["velocities_kmh"] = cfg.velocities
            if task == "DET":
                kw["snr_grid"] = cfg.det_snrs
            if task == "PRE":
                kw["snr_grid"] = cfg.pre_snrs
            data = make_task_data(task, n, cfg.scene, cfg.seed * 10 + offset, **kw)
            data.meta.update({"split": split, "seed": cfg.seed, "n": n})
            data.save(_data_path(out, task, split), cfg.scene)
            print(f"{task}\t{split}\t{len(data)}")
    cfg.save(out / "config.json")
    return 0


def _fresh_model(cfg: ExperimentConfig, mode: str) -> MultiTaskModel:
    model = MultiTaskModel(cfg.model, SeededRng(cfg.seed, 7))
    bb = Backbone(cfg.model.backbone, SeededRng(cfg.seed, 5))
    if cfg.pretrain_steps:
        pretrain_backbone(bb, cfg.pretrain_steps, seed=cfg.seed, lr=3e-2)
    pd = model.backbone.param_dict()
    for n, p in bb.named_params():
        pd[n].value[...] = p.value
    attach_adapters(model.backbone, SeededRng(cfg.seed, 8), r=cfg.rank, mode=mode)
    return model


def cmd_train(args, cfg: ExperimentConfig) -> int:
    if args.quantize not in QUANT_MODES:
        raise ValidationError(f"--quantize must be one of {QUANT_MODES}")
    tasks = _parse_tasks(args.single_task) if args.single_task else _parse_tasks(args.tasks)
    if args.single_task and len(tasks) != 1:
        raise ValidationError("--single-task takes exactly one task")
    train = {t: _load_split(args.data, t, "train") for t in tasks}
    test = {t: _load_split(args.data, t, "test") for t in tasks}
    for d in (*train.values(), *test.values()):
        check_compatible(d, cfg)
    tc = json.loads(cfg.train.to_json())
    tc.update(task_weights={t: (1.0 / len(tasks) if t in tasks else 0.0) for t in TASKS},
              use_prompt=not args.no_prompt, seed=cfg.seed)
    if args.steps is not None:
        tc["steps"] = args.steps
    tcfg = TrainConfig(**tc)
    model = _fresh_model(cfg, args.quantize)
    t0 = time.perf_counter()
    log = Trainer(model, tcfg).fit(train, tag=args.quantize)
    pred = model_predictor(model, tcfg.use_prompt)
    for t in tasks:
        log.extend(evaluate(pred, t, test[t], step=tcfg.steps, run=args.quantize))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    size = save_model(out, model, extra={"train": json.loads(tcfg.to_json()), "quantize": args.quantize,
                                         "tasks": tasks})
    log.to_csv(out.with_suffix(".metrics.csv"))
    # wall-clock facts live in a sidecar so the checkpoint and CSV stay reproducible
    out.with_suffix(".run.json").write_text(json.dumps(
        {"seconds": round(time.perf_counter() - t0, 3), "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}))
    for t in tasks:
        for r in log.select(t):
            if r["step"] == tcfg.steps and list(r["tags"].values()).count("all") == 1:
                print(f"{t}\t{r['metric']}\t{r['value']:.6g}")
    st = quantized_storage(model)
    print(f"checkpoint\t{out}\t{size} bytes")
    if st["fp16_bytes"]:
        print(f"quantized_vs_fp16\t{st['ratio']:.4f}")
    return 0


def _eval_cp(model, use_prompt, data: TaskData, order: int):
    rows = []
    out = model_predictor(model, use_prompt)("CP", data)
    t2 = data.target.shape[1]
    ar = np.empty_like(data.target)
    for i, h in enumerate(data.inputs[0]):
        f = ar_predict(h, order, t2)
        m = f.shape[1] // 2
        ar[i] = np.stack([f[:, :m], f[:, m:]], axis=-1)
    for v in np.unique(data.aux["velocity_kmh"]):
        idx = np.flatnonzero(np.isclose(data.aux["velocity_kmh"], v))
        ref = float(np.sum(data.target[idx] ** 2))
        for method, pred in (("model", out), (f"AR({order})", ar)):
            e = float(np.sum((pred[idx] - data.target[idx]) ** 2))
            rows.append(_row("cp_velocity", method, "velocity_kmh", v, "nmse_db", _nmse_db(e, ref), len(idx)))
    return rows


def _eval_det(model, use_prompt, data: TaskData, per_cell: int):
    rows = []
    const = qam(int(data.meta.get("order", 16)))
    for s in np.unique(data.aux["snr_db"]):
        idx = np.flatnonzero(np.isclose(data.aux["snr_db"], s))[:per_cell]
        sub = data.subset(idx)
        out = model_predictor(model, use_prompt)("DET", sub)
        x_true = sub.target[..., 0] + 1j * sub.target[..., 1]
        est = {"model": out[..., 0] + 1j * out[..., 1],
               "LMMSE": np.array([lmmse_detect(H, y, s2).T for H, y, s2
                                  in zip(sub.aux["H"], sub.aux["y"], sub.aux["sigma2"])]),
               "ML": np.array([ml_detect(H, y, const).T for H, y in zip(sub.aux["H"], sub.aux["y"])])}
        ref = float(np.sum(np.abs(x_true) ** 2))
        for method, x in est.items():
            e = float(np.sum(np.abs(x - x_true) ** 2))
            ser = float(np.mean(hard_demod(x, const) != sub.aux["sym"]))
            rows.append(_row("det_snr", method, "snr_db", s, "nmse_db", _nmse_db(e, ref), len(idx)))
            rows.append(_row("det_snr", method, "snr_db", s, "ser", ser, len(idx)))
    return rows


def _eval_pre(model, use_prompt, data: TaskData):
    rows = []
    log = evaluate(model_predictor(model, use_prompt), "PRE", data)
    for s in np.unique(data.aux["snr_db"]):
        idx = np.flatnonzero(np.isclose(data.aux["snr_db"], s))
        wm = float(np.mean(data.aux["wmmse_rate"][idx]))
        zf = float(np.mean(data.aux["zf_rate"][idx]))
        mr = log.last("PRE", "sum_rate", snr_db=float(s))
        for method, rate in (("model", mr), ("ZF", zf), ("WMMSE", wm)):
            rows.append(_row("pre_snr", method, "snr_db", s, "sum_rate", rate, len(idx)))
            rows.append(_row("pre_snr", method, "snr_db", s, "rate_ratio", rate / wm, len(idx)))
    return rows


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model, man = load_model(args.checkpoint)
    use_prompt = man["extra"].get("train", {}).get("use_prompt", True)
    tasks = man["extra"].get("tasks", list(TASKS))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    figs = {
        "CP": ("cp_velocity", "nmse_db", "NMSE vs user velocity", "velocity (km/h)", "NMSE (dB)", False),
        "DET": ("det_snr", "ser", "SER vs SNR", "SNR (dB)", "SER", True),
        "PRE": ("pre_snr", "sum_rate", "Sum rate vs transmit SNR", "P/sigma^2 (dB)", "sum rate (bit/s/Hz)", False),
    }
    for task in tasks:
        data = _load_split(args.data, task, "test")
        check_compatible(data, cfg)
        if task == "CP":
            rows = _eval_cp(model, use_prompt, data, args.ar_order)
        elif task == "DET":
            rows = _eval_det(model, use_prompt, data, cfg.det_eval_samples)
        else:
            rows = _eval_pre(model, use_prompt, data)
        name, metric, title, xl, yl, logy = figs[task]
        _write_rows(out / f"{name}.csv", rows)
        series = series_from_rows(rows, metric)
        if logy:
            series = {k: v for k, v in series.items() if min(v[1]) > 0}
            logy = bool(series)
        line_plot(out / f"{name}.svg", series, title, xl, yl, logy=logy)
        for r in rows:
            print(f"{r['figure']}\t{r['method']}\t{r['grid_value']:g}\t{r['metric']}\t{r['value']:.6g}")
    return 0


def cmd_quantize_demo(args, cfg: ExperimentConfig) -> int:
    d1, d2 = args.dims
    rows, wins = [], 0
    for s in range(args.seeds):
        W = SeededRng(cfg.seed + s, 31).gen.standard_normal((d1, d2))
        res = loftq_init(W, args.rank, iters=args.iters)
        best = np.inf
        for i, (pre, post) in enumerate(zip(res.pre_svd, res.trace)):
            best = min(best, post)
            rows.append([s, i + 1, repr(pre), repr(post), repr(best), repr(res.naive_error)])
        wins += res.error < res.naive_error
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "iter", "pre_svd_error", "error", "best_error", "naive_error"])
        w.writerows(rows)
    print(f"loftq_wins\t{wins}/{args.seeds}")
    return 0


def _timeit(fn, reps):
    fn()
    t = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t) / reps


def cmd_bench(args, cfg: ExperimentConfig) -> int:
    rng = SeededRng(cfg.seed, 41)
    model = MultiTaskModel(cfg.model, rng.spawn(1))
    attach_adapters(model.backbone, rng.spawn(2), r=cfg.rank)
    res = {}
    for task in TASKS:
        batch = make_task_data(task, args.batch, cfg.scene, cfg.seed)

        def step(task=task, batch=batch):
            out = model.forward(task, batch.inputs)
            model.backward(np.ones_like(out))

        res[f"fwd_bwd_{task.lower()}_ms"] = 1e3 * _timeit(step, args.reps)
    M = rng.gen.standard_normal((64, 64))
    res["svd64_ms"] = 1e3 * _timeit(lambda: svd(M), args.reps)
    res["loftq64_ms"] = 1e3 * _timeit(lambda: loftq_init(M, cfg.rank), max(1, args.reps // 5))
    H = (rng.gen.standard_normal((16, 4)) + 1j * rng.gen.standard_normal((16, 4))) / np.sqrt(2)
    res["wmmse_ms"] = 1e3 * _timeit(lambda: wmmse_precoder(H, 1.0, 0.1), args.reps)
    for k, v in res.items():
        print(f"{k}\t{v:.3f}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phymt", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="write per-task train/test datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--tasks", default="all")

    t = sub.add_parser("train", help="train a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--tasks", default="all")
    t.add_argument("--single-task")
    t.add_argument("--no-prompt", action="store_true")
    t.add_argument("--quantize", default="none", choices=QUANT_MODES)
    t.add_argument("--steps", type=int)

    e = sub.add_parser("eval", help="sweep a checkpoint against baselines; CSV + SVG")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ar-order", type=int, default=2)

    q = sub.add_parser("quantize-demo", help="alternating vs naive 4-bit initialization")
    q.add_argument("--dims", type=int, nargs=2, default=(64, 64))
    q.add_argument("--rank", type=int, default=8)
    q.add_argument("--iters", type=int, default=5)
    q.add_argument("--seeds", type=int, default=100)
    q.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="time the hot paths")
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--reps", type=int, default=10)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "quantize-demo": cmd_quantize_demo, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.cmd](args, cfg)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
