"""JSON experiment configuration for the command-line harness."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..channel import SceneConfig
from ..errors import ValidationError
from ..nn.model import BackboneConfig, ModelConfig
from ..training.train import TrainConfig

SEED_ENV = "PHYMT_SEED"


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 2000
    n_test: int = 500
    pretrain_steps: int = 1000
    rank: int = 8
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=3000, lr=3e-2))
    velocities: tuple = (10.0, 50.0, 100.0)
    det_snrs: tuple = (5.0, 10.0, 15.0, 20.0)
    pre_snrs: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    det_eval_samples: int = 50

    def __post_init__(self):
        for name in ("velocities", "det_snrs", "pre_snrs"):
            if len(getattr(self, name)) == 0:
                raise ValidationError(f"grid {name} is empty")
        if self.n_train < 1 or self.n_test < 1:
            raise ValidationError("sample counts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        d["model"] = self.model.to_dict()
        d["train"] = json.loads(self.train.to_json())
        for k in ("velocities", "det_snrs", "pre_snrs"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        if "scene" in d:
            d["scene"] = SceneConfig.from_dict(d["scene"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        for k in ("velocities", "det_snrs", "pre_snrs"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    @classmethod
    def load(cls, path=None) -> "ExperimentConfig":
        """Read ``path`` (defaults when None) and apply the seed override."""
        if path is None:
            cfg = cls()
        else:
            try:
                cfg = cls.from_dict(json.loads(Path(path).read_text()))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
            except TypeError as exc:
                raise ValidationError(f"{path}: {exc}") from exc
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                cfg.seed = int(env)
            except ValueError as exc:
                raise ValidationError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
        cfg.train.seed = cfg.seed
        return cfg

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def small_config(**kw) -> ExperimentConfig:
    """A seconds-scale configuration for smoke tests."""
    model = ModelConfig(backbone=BackboneConfig(depth=1, d_model=32, n_heads=2, d_ff=64),
                        enc_blocks=1, se_blocks=1)
    base = dict(n_train=48, n_test=24, pretrain_steps=20, model=model,
                train=TrainConfig(steps=30, lr=3e-2), det_eval_samples=4)
    base.update(kw)
    return ExperimentConfig(**base)
