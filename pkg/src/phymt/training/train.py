"""Optimization, the random-task schedule, evaluation and the metric log."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..detection import hard_demod, qam
from ..errors import MissingDataError, NumericalFailure, ValidationError
from ..nn.layers import Linear
from ..nn.model import TASKS, MultiTaskModel
from ..numerics import SeededRng
from ..precoding import PowerParams, structured_precoder, sum_rate
from .data import TaskData
from .losses import loss_cp, loss_det, loss_pre_supervised, loss_pre_unsupervised


# ---------------------------------------------------------------- config / log

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    clip: float = 1.0
    seed: int = 0
    task_weights: dict = field(default_factory=lambda: {t: 1.0 / 3 for t in TASKS})
    switch_frac: float = 0.6
    eval_every: int = 0
    use_prompt: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValidationError("steps must be >= 0 and batch_size >= 1")
        w = self.task_weights
        if any(v < 0 for v in w.values()) or not math.isclose(sum(w.values()), 1.0, abs_tol=1e-9):
            raise ValidationError(f"task weights must be non-negative and sum to 1, got {w}")
        if not 0.0 <= self.switch_frac <= 1.0:
            raise ValidationError("switch_frac must lie in [0, 1]")

    @property
    def switch_step(self) -> int:
        return int(round(self.switch_frac * self.steps))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))

    @classmethod
    def single(cls, task: str, **kw) -> "TrainConfig":
        return cls(task_weights={t: float(t == task) for t in TASKS}, **kw)


class MetricLog:
    """Append-only rows ``(step, task, metric, value, tags)``."""

    HEADER = ("step", "task", "metric", "value", "tags")

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, step: int, task: str, metric: str, value: float, **tags):
        self.rows.append({"step": int(step), "task": task, "metric": metric,
                          "value": float(value), "tags": dict(tags)})

    def extend(self, other: "MetricLog"):
        self.rows.extend(other.rows)
        return self

    def __len__(self):
        return len(self.rows)

    def select(self, task=None, metric=None, **tags) -> list[dict]:
        out = []
        for r in self.rows:
            if task is not None and r["task"] != task:
                continue
            if metric is not None and r["metric"] != metric:
                continue
            if any(r["tags"].get(k) != v for k, v in tags.items()):
                continue
            out.append(r)
        return out

    def last(self, task, metric, **tags) -> float:
        rows = self.select(task, metric, **tags)
        if not rows:
            raise MissingDataError(f"no {task}/{metric} rows for {tags}")
        return rows[-1]["value"]

    @staticmethod
    def format_tags(tags: dict) -> str:
        return ";".join(f"{k}={tags[k]}" for k in sorted(tags))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r["step"], r["task"], r["metric"], repr(r["value"]),
                            self.format_tags(r["tags"])])

    @classmethod
    def from_csv(cls, path) -> "MetricLog":
        log = cls()
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            if tuple(next(rd)) != cls.HEADER:
                raise ValidationError(f"{path}: unexpected metric header")
            for step, task, metric, value, tags in rd:
                kv = dict(t.split("=", 1) for t in tags.split(";") if t)
                log.rows.append({"step": int(step), "task": task, "metric": metric,
                                 "value": float(value), "tags": kv})
        return log


# ---------------------------------------------------------------- optimizer

class MomentumSGD:
    """Heavy-ball gradient descent with global gradient-norm clipping."""

    def __init__(self, lr: float = 1e-2, momentum: float = 0.9, clip: float | None = 1.0):
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self._vel: dict[int, np.ndarray] = {}

    def step(self, params):
        params = [p for p in params if p.trainable]
        norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        for p in params:
            v = self._vel.get(id(p))
            if v is None:
                v = self._vel[id(p)] = np.zeros_like(p.value)
            v *= self.momentum
            v += scale * p.grad
            p.value -= self.lr * v
        return norm


def sample_task(rng: SeededRng, weights: dict) -> str:
    names = list(weights)
    w = np.array([weights[n] for n in names], dtype=float)
    return names[int(rng.gen.choice(len(names), p=w / w.sum()))]


# ---------------------------------------------------------------- steps

def compute_loss(model: MultiTaskModel, task: str, data: TaskData, out, stage: str = "supervised"):
    if task == "CP":
        return loss_cp(out, data.target)
    if task == "DET":
        return loss_det(out, data.target)
    if stage == "supervised":
        return loss_pre_supervised(out, data.target[..., 0], data.target[..., 1])
    return loss_pre_unsupervised(out, data.aux["H"], data.aux["sigma2"], model.cfg.p_max)


class Trainer:
    """Owns the optimizer state and per-task parameter lists of one model."""

    def __init__(self, model: MultiTaskModel, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        self.opt = MomentumSGD(cfg.lr, cfg.momentum, cfg.clip)
        self._params = {t: [p for _, p in model.task_params(t) if p.trainable] for t in model.encoders}
        self.step_count = 0

    def train_step(self, task: str, batch: TaskData, stage: str = "supervised") -> float:
        params = self._params[task]
        for p in params:
            p.grad[...] = 0.0
        try:
            out = self.model.forward(task, batch.inputs, use_prompt=self.cfg.use_prompt)
            loss, g = compute_loss(self.model, task, batch, out, stage)
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite {task} loss")
            self.model.backward(g)
        except NumericalFailure as exc:
            raise NumericalFailure(f"{exc} at step {self.step_count}") from exc
        self.opt.step(params)
        self.step_count += 1
        return loss

    def fit(self, train: dict, log: MetricLog | None = None, evals: dict | None = None,
            tag: str = "") -> MetricLog:
        """Run ``cfg.steps`` steps of random-task training.

        Precoding uses the supervised loss before ``cfg.switch_step`` and the
        rate loss from then on.
        """
        cfg = self.cfg
        log = MetricLog() if log is None else log
        weights = {t: w for t, w in cfg.task_weights.items() if w > 0}
        missing = [t for t in weights if t not in train]
        if missing:
            raise MissingDataError(f"no training data for {missing}")
        rng = SeededRng(cfg.seed, 11)
        for step in range(cfg.steps):
            task = sample_task(rng, weights)
            data = train[task]
            idx = rng.gen.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
            stage = "supervised" if step < cfg.switch_step else "unsupervised"
            loss = self.train_step(task, data.subset(idx), stage if task == "PRE" else "supervised")
            log.add(step, task, "loss" if task != "PRE" else f"loss_{stage}", loss, run=tag)
            if cfg.eval_every and evals and (step + 1) % cfg.eval_every == 0:
                for t, d in evals.items():
                    if t in weights:
                        log.extend(evaluate(model_predictor(self.model, cfg.use_prompt), t, d,
                                            step=step + 1, run=tag))
        return log


def train_step(model, batch: TaskData, task: str, config: TrainConfig, trainer: Trainer | None = None,
               stage: str = "supervised") -> float:
    """One optimizer step on ``batch``; pass a persistent ``trainer`` to keep momentum."""
    trainer = trainer or Trainer(model, config)
    return trainer.train_step(task, batch, stage)


# ---------------------------------------------------------------- evaluation

def model_predictor(model: MultiTaskModel, use_prompt: bool = True, batch: int = 256):
    def predict(task: str, data: TaskData):
        outs = []
        for s in range(0, len(data), batch):
            sub = tuple(x[s:s + batch] for x in data.inputs)
            outs.append(model.forward(task, sub, use_prompt=use_prompt))
        return np.concatenate(outs, axis=0)

    return predict


def _nmse_db(err_energy: float, ref_energy: float) -> float:
    if ref_energy <= 0:
        raise MissingDataError("zero reference energy")
    ratio = err_energy / ref_energy
    return -300.0 if ratio <= 0 else max(10 * math.log10(ratio), -300.0)


def _precoders(out, data: TaskData, p_max: float):
    """Complex precoders from either (B, K, 2) parameters or (B, N_T, K) matrices."""
    out = np.asarray(out)
    if np.iscomplexobj(out):
        return out
    Ws = []
    for b in range(len(out)):
        lam, p = out[b, :, 0], out[b, :, 1]
        params = PowerParams(p_max * lam / lam.sum(), p_max * p / p.sum(), p_max)
        Ws.append(structured_precoder(data.aux["H"][b], params, data.aux["sigma2"][b]).W)
    return np.array(Ws)


GRID_KEYS = {"CP": "velocity_kmh", "DET": "snr_db", "PRE": "snr_db"}


def evaluate(predict, task: str, data: TaskData, grid_key: str | None = None, step: int = -1,
             **tags) -> MetricLog:
    """Per-grid-cell metrics plus an ``all`` cell.

    ``predict(task, data)`` returns outputs in decoder layout; for precoding
    it may instead return complex precoder matrices (baselines).

    CP: ``nmse_db``. DET: ``nmse_db`` and ``ser``. PRE: ``sum_rate``,
    ``rate_ratio`` (mean rate over mean WMMSE rate) and ``zf_rate``.
    """
    if len(data) == 0:
        raise MissingDataError(f"empty {task} evaluation set")
    grid_key = grid_key or GRID_KEYS[task]
    out = predict(task, data)
    log = MetricLog()
    cells = [("all", np.arange(len(data)))]
    if grid_key in data.aux:
        for v in np.unique(data.aux[grid_key]):
            cells.append((v, np.flatnonzero(np.isclose(data.aux[grid_key], v))))
    if task == "PRE":
        W = _precoders(out, data, data.meta.get("p_max", 1.0))
        rates = np.array([sum_rate(data.aux["H"][b], W[b], data.aux["sigma2"][b])
                          for b in range(len(data))])
    for value, idx in cells:
        if len(idx) == 0:
            raise MissingDataError(f"empty {task} cell {grid_key}={value}")
        ctag = {**tags, grid_key: value if value == "all" else float(value)}
        if task == "CP":
            e = out[idx] - data.target[idx]
            log.add(step, task, "nmse_db", _nmse_db(float(np.sum(e * e)),
                                                    float(np.sum(data.target[idx] ** 2))), **ctag)
        elif task == "DET":
            e = out[idx] - data.target[idx]
            log.add(step, task, "nmse_db", _nmse_db(float(np.sum(e * e)),
                                                    float(np.sum(data.target[idx] ** 2))), **ctag)
            const = qam(int(data.meta.get("order", 16)))
            x = out[idx][..., 0] + 1j * out[idx][..., 1]
            ser = float(np.mean(hard_demod(x, const) != data.aux["sym"][idx]))
            log.add(step, task, "ser", ser, **ctag)
        else:
            mr = float(np.mean(rates[idx]))
            log.add(step, task, "sum_rate", mr, **ctag)
            log.add(step, task, "rate_ratio", mr / float(np.mean(data.aux["wmmse_rate"][idx])), **ctag)
            log.add(step, task, "zf_rate", float(np.mean(data.aux["zf_rate"][idx])), **ctag)
    return log


def task_loss(model: MultiTaskModel, task: str, data: TaskData, use_prompt: bool = True,
              stage: str = "supervised") -> float:
    """Loss over a whole dataset; the rate loss is evaluated without its gradient."""
    out = model_predictor(model, use_prompt)(task, data)
    if task == "PRE" and stage != "supervised":
        W = _precoders(out, data, model.cfg.p_max)
        return -float(np.mean([sum_rate(data.aux["H"][b], W[b], data.aux["sigma2"][b])
                               for b in range(len(data))]))
    return compute_loss(model, task, data, out, stage)[0]


# ---------------------------------------------------------------- schedules

def run_two_stage_precoding(model: MultiTaskModel, cfg: TrainConfig, train: TaskData,
                            test: TaskData | None = None, trainer: Trainer | None = None) -> MetricLog:
    """Supervised label regression, then rate maximization from ``cfg.switch_step``."""
    if cfg.task_weights.get("PRE", 0) != 1.0:
        cfg = TrainConfig(**{**asdict(cfg), "task_weights": {t: float(t == "PRE") for t in TASKS}})
    trainer = trainer or Trainer(model, cfg)
    log = trainer.fit({"PRE": train}, tag="two_stage")
    if test is not None:
        log.extend(evaluate(model_predictor(model, cfg.use_prompt), "PRE", test, step=cfg.steps,
                            run="two_stage"))
    return log


def steps_to_threshold(model: MultiTaskModel, cfg: TrainConfig, task: str, train: TaskData,
                       threshold: float, probe: TaskData, check_every: int = 10) -> int:
    """First step count at which the loss on ``probe`` drops to ``threshold``.

    Returns ``cfg.steps + 1`` if the threshold is never reached.
    """
    trainer = Trainer(model, cfg)
    rng = SeededRng(cfg.seed, 11)
    for step in range(1, cfg.steps + 1):
        idx = rng.gen.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        trainer.train_step(task, train.subset(idx))
        if step % check_every == 0 and task_loss(model, task, probe, cfg.use_prompt) <= threshold:
            return step
    return cfg.steps + 1


def pretrain_backbone(backbone, steps: int = 1000, seed: int = 0, batch: int = 16, seq_len: int = 16,
                      lr: float = 1e-2, momentum: float = 0.9, clip: float = 1.0) -> list[float]:
    """Generic next-token regression on noisy linear dynamics, then freeze.

    Sequences follow ``x_{t+1} = a x_t Q + sqrt(1 - a^2) e_t`` with one fixed
    random rotation ``Q`` and a per-sequence coefficient ``a ~ U(0.3, 0.95)``.
    A throwaway linear read-out is trained jointly. Returns the loss trace.
    """
    d = backbone.cfg.d_model
    rng = SeededRng(seed, 21)
    Q, _ = np.linalg.qr(rng.gen.standard_normal((d, d)))
    head = Linear(d, d, rng.spawn(1))
    opt = MomentumSGD(lr, momentum, clip)
    params = [p for _, p in backbone.named_params()] + [p for _, p in head.named_params()]
    trace = []
    for _ in range(steps):
        a = rng.gen.uniform(0.3, 0.95, size=(batch, 1))
        e = rng.gen.standard_normal((batch, seq_len, d))
        x = np.empty_like(e)
        x[:, 0] = e[:, 0]
        for t in range(1, seq_len):
            x[:, t] = a * (x[:, t - 1] @ Q) + np.sqrt(1 - a * a) * e[:, t]
        for p in params:
            p.grad[...] = 0.0
        y = head(backbone(x[:, :-1]))
        err = y - x[:, 1:]
        n = err.size
        trace.append(float(np.sum(err * err)) / n)
        backbone.backward(head.backward(2 * err / n))
        opt.step(params)
    backbone.freeze()
    return trace
