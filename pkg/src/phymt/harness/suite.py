"""Desk-scale multi-task trend experiments shared by the CLI and the tests."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..channel import SceneConfig
from ..lora import attach_adapters
from ..nn.model import Backbone, ModelConfig, MultiTaskModel
from ..numerics import SeededRng
from ..training.data import make_task_data
from ..training.train import (MetricLog, TrainConfig, Trainer, evaluate, model_predictor,
                              pretrain_backbone, steps_to_threshold, task_loss)

TASK_ORDER = ("CP", "DET", "PRE")


@dataclass
class SuiteConfig:
    n_train: int = 2000
    n_test: int = 500
    steps: int = 3000
    single_steps: int | None = None  # default: steps / 3, the multi-task share
    lr: float = 3e-2
    seed: int = 0
    pretrain_steps: int = 1000
    pretrain_lr: float = 3e-2
    rank: int = 8
    cp_velocities: tuple = (10.0, 50.0, 100.0)
    ablation_seeds: int = 5
    # detection sits on a predict-zero plateau (loss 0.5) for ~1000 steps at
    # this scale, so the threshold must lie just below it to be reachable
    ablation_steps: int = 2000
    ablation_threshold: float = 0.46
    ablation_probe: int = 100
    ablation_check_every: int = 25
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def build_datasets(cfg: SuiteConfig, scene: SceneConfig | None = None):
    """Train/test sets per task; the CP test set cycles the velocity grid."""
    scene = scene or SceneConfig()
    train = {t: make_task_data(t, cfg.n_train, scene, cfg.seed * 10 + 1) for t in TASK_ORDER}
    test = {t: make_task_data(t, cfg.n_test, scene, cfg.seed * 10 + 2) for t in ("DET", "PRE")}
    test["CP"] = make_task_data("CP", cfg.n_test, scene, cfg.seed * 10 + 2,
                                velocities_kmh=cfg.cp_velocities)
    return train, test


def pretrained_backbone(cfg: SuiteConfig) -> dict:
    """Parameter values of a backbone pre-trained on the generic sequence task."""
    bb = Backbone(cfg.model.backbone, SeededRng(cfg.seed, 5))
    if cfg.pretrain_steps:
        pretrain_backbone(bb, cfg.pretrain_steps, seed=cfg.seed, lr=cfg.pretrain_lr)
    return {n: p.value.copy() for n, p in bb.named_params()}


def build_model(cfg: SuiteConfig, base: dict, mode: str = "none", seed: int | None = None) -> MultiTaskModel:
    seed = cfg.seed if seed is None else seed
    model = MultiTaskModel(cfg.model, SeededRng(seed, 7))
    pd = model.backbone.param_dict()
    for n, v in base.items():
        pd[n].value[...] = v
    attach_adapters(model.backbone, SeededRng(seed, 8), r=cfg.rank, mode=mode)
    return model


def task_metrics(model: MultiTaskModel, test: dict, use_prompt: bool = True) -> dict:
    """Test metrics per task.

    ``score`` is lower-is-better for every task: linear NMSE for CP and DET,
    minus the mean sum rate for precoding.
    """
    pred = model_predictor(model, use_prompt)
    out = {}
    for t, d in test.items():
        log = evaluate(pred, t, d)
        m = {"loss": task_loss(model, t, d, use_prompt)}
        if t == "PRE":
            m["sum_rate"] = log.last("PRE", "sum_rate", snr_db="all")
            m["rate_ratio"] = log.last("PRE", "rate_ratio", snr_db="all")
            m["score"] = -m["sum_rate"]
        else:
            key = "velocity_kmh" if t == "CP" else "snr_db"
            m["nmse_db"] = log.last(t, "nmse_db", **{key: "all"})
            m["score"] = 10 ** (m["nmse_db"] / 10)
            if t == "DET":
                m["ser"] = log.last(t, "ser", snr_db="all")
            if t == "CP":
                m["by_velocity"] = {r["tags"]["velocity_kmh"]: r["value"]
                                    for r in log.select("CP", "nmse_db") if r["tags"]["velocity_kmh"] != "all"}
        out[t] = m
    return out


def train_run(cfg: SuiteConfig, base: dict, train: dict, mode: str = "none",
              only: str | None = None, use_prompt: bool = True, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    model = build_model(cfg, base, mode, seed)
    if only is None:
        tc = TrainConfig(steps=cfg.steps, lr=cfg.lr, seed=seed, use_prompt=use_prompt)
    else:
        tc = TrainConfig.single(only, steps=cfg.single_steps or cfg.steps // 3, lr=cfg.lr, seed=seed,
                                use_prompt=use_prompt)
    log = Trainer(model, tc).fit(train, tag=f"{mode}:{only or 'all'}")
    return model, log


def prompt_ablation(cfg: SuiteConfig, base: dict, train: dict, test: dict) -> list[tuple[int, int]]:
    """Detection steps-to-threshold ``(with prompt, without)`` per seed."""
    probe = test["DET"].subset(np.arange(min(cfg.ablation_probe, len(test["DET"]))))
    res = []
    for s in range(cfg.ablation_seeds):
        pair = []
        for use_prompt in (True, False):
            model = build_model(cfg, base, "none", seed=cfg.seed + 100 + s)
            tc = TrainConfig.single("DET", steps=cfg.ablation_steps, lr=cfg.lr, seed=cfg.seed + 100 + s,
                                    use_prompt=use_prompt)
            pair.append(steps_to_threshold(model, tc, "DET", train["DET"], cfg.ablation_threshold, probe,
                                           check_every=cfg.ablation_check_every))
        res.append(tuple(pair))
    return res


def run_trend_suite(cfg: SuiteConfig, progress=None) -> dict:
    """Every run of the trend suite plus the five pass/fail verdicts."""
    say = progress or (lambda msg: None)
    t0 = time.perf_counter()
    train, test = build_datasets(cfg)
    say(f"data ready ({time.perf_counter() - t0:.0f}s)")
    base = pretrained_backbone(cfg)
    init = task_metrics(build_model(cfg, base), test)
    runs, logs = {}, MetricLog()
    for mode in ("none", "nf4", "loftq"):
        model, log = train_run(cfg, base, train, mode)
        runs[mode] = task_metrics(model, test)
        logs.extend(log)
        say(f"multi-task {mode} done ({time.perf_counter() - t0:.0f}s)")
    single = {}
    for t in TASK_ORDER:
        model, log = train_run(cfg, base, train, "none", only=t)
        single[t] = task_metrics(model, {t: test[t]})[t]
        logs.extend(log)
    say(f"single-task runs done ({time.perf_counter() - t0:.0f}s)")
    ablation = prompt_ablation(cfg, base, train, test)
    say(f"prompt ablation done ({time.perf_counter() - t0:.0f}s)")

    fp, nf4, lq = runs["none"], runs["nf4"], runs["loftq"]
    verdict = {}
    verdict["a"] = all(fp[t]["score"] < init[t]["score"] for t in TASK_ORDER)

    def within(t):
        if t == "PRE":
            return fp[t]["sum_rate"] >= 0.75 * single[t]["sum_rate"]
        return fp[t]["loss"] <= 1.25 * single[t]["loss"]

    verdict["b"] = all(within(t) for t in TASK_ORDER)
    # a seed where neither run reaches the threshold is a tie, not a win
    cap = cfg.ablation_steps + 1
    verdict["c"] = sum(w <= wo and w < cap for w, wo in ablation) > len(ablation) / 2
    close = all(abs(lq[t]["score"] - fp[t]["score"]) <= 0.1 * abs(fp[t]["score"]) for t in TASK_ORDER)
    wins = sum(lq[t]["score"] < nf4[t]["score"] for t in TASK_ORDER)
    verdict["d"] = close and wins >= 2
    v = fp["CP"]["by_velocity"]
    grid = [v[float(x)] for x in cfg.cp_velocities]
    verdict["e"] = all(a <= b for a, b in zip(grid, grid[1:]))
    return {"init": init, "runs": runs, "single": single, "ablation": ablation,
            "loftq_wins": wins, "verdict": verdict, "log": logs,
            "seconds": time.perf_counter() - t0}
