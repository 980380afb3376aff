"""Experiment configuration: a flat dataclass mirrored 1:1 by JSON keys.

``task`` and ``model`` are nested documents whose keys mirror TaskSpec
and ModelConfig.  Presets follow the hyperparameter structure used for
the full-scale runs: scarce-data tasks get larger learning rates and
penalty coefficients (their ADMM iterations are much shorter) and more
epochs; plentiful-data tasks get smaller values and fewer epochs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .models import ModelConfig
from .tasks import TaskSpec

METHODS = ("admm-nxm", "asp", "admm-unstructured", "dense")


@dataclass
class RunConfig:
    method: str = "admm-nxm"
    n: int = 4
    m: int = 2
    rho: float | None = None
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 5
    steps_per_iteration: int = 80
    min_iterations: int = 10
    seed: int = 0
    sparsity: float = 0.5
    adopt_z: bool = False
    reset_adam_per_iteration: bool = False
    checkpoint: str | None = None
    pretrain_samples: int = 20_000
    pretrain_epochs: int = 4
    pretrain_lr: float = 1e-3
    output_dir: str = "runs/out"
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        admm_based = self.method in ("admm-nxm", "admm-unstructured")
        if admm_based and self.rho is None:
            raise ValueError(f"method {self.method!r} requires rho")
        if not admm_based and self.rho is not None:
            raise ValueError(f"rho is not meaningful for method {self.method!r}; leave it unset")
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho must be >= 0")
        for name in ("lr", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "epochs", "steps_per_iteration", "min_iterations",
                     "pretrain_samples", "pretrain_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError("sparsity must be in (0, 1)")
        if self.method in ("admm-nxm", "asp") and not self.model.compatible_with_group(self.n):
            raise ValueError(
                f"model hidden={self.model.hidden} (ffn x{self.model.ffn_multiple}) "
                f"is not divisible by group size n={self.n}"
            )
        if self.model.objective != self.task.objective:
            raise ValueError(
                f"model objective {self.model.objective!r} does not match task {self.task.kind!r}"
            )
        if self.task.kind == "cluster-classification" and self.model.out_dim != self.task.num_classes:
            raise ValueError("model.out_dim must equal task.num_classes for classification")
        if self.task.feature_dim != self.model.feature_dim or self.task.seq_len != self.model.seq_len:
            raise ValueError("task and model disagree on feature_dim or seq_len")
        return self

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    task = TaskSpec(**doc.pop("task", {}))
    model_doc = doc.pop("model", {})
    unknown = set(doc) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(task=task, model=_model_for(task, model_doc), **doc)
    return cfg


def _model_for(task: TaskSpec, model_doc: dict) -> ModelConfig:
    """Model config with task-derived head fields unless explicitly given."""
    defaults = {
        "out_dim": task.out_dim,
        "objective": task.objective,
        "feature_dim": task.feature_dim,
        "seq_len": task.seq_len,
    }
    defaults.update(model_doc)
    return ModelConfig(**defaults)


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def apply_overrides(doc: dict, overrides: dict[str, str]) -> dict:
    """Apply --key=value strings onto a config document; dotted keys reach
    into the nested task/model documents.  Values parse as JSON when
    possible, else stay strings."""
    doc = json.loads(json.dumps(doc))  # deep copy
    for key, raw in overrides.items():
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = doc
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return doc


def preset(name: str, seed: int = 0) -> RunConfig:
    """Named starting configurations.

    reference: the 20k-sample teacher-regression task with the default
    schedule (80 steps per iteration, at least 10 iterations).
    low-resource: 2.5k samples, longer epochs, larger lr and rho.
    high-resource: 50k samples, fewer epochs, smaller lr and rho.
    """
    if name == "reference":
        task = TaskSpec(train_samples=20_000, seed=seed, input_shift=0.6)
        return RunConfig(method="admm-nxm", rho=1e-2, lr=5e-4, epochs=6,
                         pretrain_epochs=4, seed=seed, task=task,
                         model=_model_for(task, {}))
    if name == "low-resource":
        task = TaskSpec(train_samples=2_500, val_samples=1_000, seed=seed,
                        input_shift=1.5, label_noise=0.05,
                        teacher_blocks=2, teacher_hidden=32)
        return RunConfig(method="admm-nxm", rho=3e-2, lr=1e-3, epochs=30,
                         steps_per_iteration=78, pretrain_epochs=8, seed=seed,
                         task=task, model=_model_for(task, {}))
    if name == "high-resource":
        task = TaskSpec(train_samples=50_000, seed=seed, input_shift=0.6)
        return RunConfig(method="admm-nxm", rho=3e-3, lr=3e-4, epochs=2,
                         pretrain_epochs=3, seed=seed, task=task,
                         model=_model_for(task, {}))
    raise ValueError(f"unknown preset {name!r}")
