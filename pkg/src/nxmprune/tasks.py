"""Synthetic tasks and the dense pretrain that produces the starting checkpoint.

Two task families mimic a pretrain-then-finetune pipeline at desk scale:

* teacher-regression: targets come from a fixed, seeded teacher network
  plus Gaussian label noise, so the irreducible loss is the noise
  variance by construction.
* cluster-classification: token sequences scattered around seeded class
  centers.

The pretrain stage samples inputs from a broad base distribution
(``input_shift == 0``); the fine-tune stage samples a shifted, slightly
narrower distribution from the same generator family, preserving the
premise that fine-tuning adapts an already-converged representation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Adam, Tensor
from .models import ModelConfig, ToyTransformer

# Sub-stream tags so teacher weights, data draws, and batch order are
# independent deterministic streams of the task seed.
_TEACHER_TAG = 7001
_DATA_TAG = 3571
_BATCH_TAG = 9040


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "teacher-regression"  # | "cluster-classification"
    train_samples: int = 20_000
    val_samples: int = 1_000
    seed: int = 0
    seq_len: int = 8
    feature_dim: int = 16
    label_noise: float = 0.1
    num_classes: int = 4
    input_shift: float = 0.0
    teacher_blocks: int = 1
    teacher_hidden: int = 16

    def __post_init__(self):
        if self.kind not in ("teacher-regression", "cluster-classification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.train_samples < 1 or self.val_samples < 1:
            raise ValueError("sample counts must be positive")

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == "teacher-regression" else self.num_classes

    @property
    def objective(self) -> str:
        return "regression" if self.kind == "teacher-regression" else "classification"


def pretrain_spec(spec: TaskSpec, train_samples: int = 20_000) -> TaskSpec:
    """The broad-distribution variant used to produce the dense checkpoint."""
    return replace(spec, input_shift=0.0, train_samples=train_samples)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    kind: str

    def __len__(self) -> int:
        return len(self.x_train)


def teacher_model(spec: TaskSpec) -> ToyTransformer:
    cfg = ModelConfig(
        kind="transformer",
        blocks=spec.teacher_blocks,
        hidden=spec.teacher_hidden,
        heads=2,
        feature_dim=spec.feature_dim,
        seq_len=spec.seq_len,
        out_dim=1,
        objective="regression",
    )
    return ToyTransformer(cfg, seed=int(np.random.default_rng([spec.seed, _TEACHER_TAG]).integers(2**31)))


def _teacher_targets(teacher: ToyTransformer, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
    outs = [teacher.forward(x[i : i + chunk]).data for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def _data_rng(spec: TaskSpec) -> np.random.Generator:
    return np.random.default_rng(
        [spec.seed, _DATA_TAG, spec.train_samples, int(round(spec.input_shift * 1e9))]
    )


def _shift_direction(spec: TaskSpec) -> np.ndarray:
    v = np.random.default_rng([spec.seed, 777]).standard_normal(spec.feature_dim)
    return v / np.linalg.norm(v)


def generate_task(spec: TaskSpec) -> Dataset:
    """Deterministic dataset for the spec; validation drawn after (and
    disjoint from) the training samples from the same stream."""
    rng = _data_rng(spec)
    total = spec.train_samples + spec.val_samples
    if spec.kind == "teacher-regression":
        x = rng.standard_normal((total, spec.seq_len, spec.feature_dim))
        if spec.input_shift:
            x = 0.8 * x + spec.input_shift * _shift_direction(spec)
        teacher = teacher_model(spec)
        y = _teacher_targets(teacher, x)
        y = y + spec.label_noise * rng.standard_normal(y.shape)
    else:
        centers = 3.0 * np.random.default_rng([spec.seed, 555]).standard_normal(
            (spec.num_classes, spec.feature_dim)
        )
        labels = rng.integers(spec.num_classes, size=total)
        token_noise = 0.6 if spec.input_shift == 0.0 else 0.5
        x = centers[labels][:, None, :] + token_noise * rng.standard_normal(
            (total, spec.seq_len, spec.feature_dim)
        )
        if spec.input_shift:
            x = x + spec.input_shift * _shift_direction(spec)
        y = labels.astype(np.int64)
    n = spec.train_samples
    return Dataset(x[:n], y[:n], x[n:], y[n:], spec.kind)


def batch_stream(dataset: Dataset, batch_size: int, epochs: int, seed: int):
    """Yield (epoch, x, y) full batches, reshuffled each epoch.

    The order is a deterministic function of the seed alone, so two
    training loops given the same seed see identical batch sequences.
    Trailing samples that do not fill a batch are skipped that epoch.
    """
    n = len(dataset)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch size {batch_size} invalid for {n} training samples")
    rng = np.random.default_rng([seed, _BATCH_TAG])
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield epoch, dataset.x_train[idx], dataset.y_train[idx]


def steps_per_epoch(dataset: Dataset, batch_size: int) -> int:
    return len(dataset) // batch_size


def evaluate(model, x: np.ndarray, y: np.ndarray, chunk: int = 256) -> float:
    """Mean loss over a held-out set, computed in fixed-size chunks."""
    total = 0.0
    for i in range(0, len(x), chunk):
        xc, yc = x[i : i + chunk], y[i : i + chunk]
        total += model.loss(xc, yc).item() * len(xc)
    return total / len(x)


def pretrain_dense(
    spec: TaskSpec,
    model_config: ModelConfig,
    *,
    epochs: int = 4,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
):
    """Train a dense model on the broad task; returns (model, info dict).

    The caller persists ``model.params`` as the checkpoint that sparse
    fine-tuning starts from.  The recorded final train/validation losses
    serve as the dense reference for later comparisons.
    """
    from .models import build_model  # local import keeps module load order simple

    dataset = generate_task(spec)
    model = build_model(model_config, seed=int(np.random.default_rng([seed, 11]).integers(2**31)))
    adam = Adam(model.params, lr=lr)
    last_train = float("nan")
    for _, xb, yb in batch_stream(dataset, batch_size, epochs, seed):
        adam.zero_grad()
        loss = model.loss(xb, yb)
        loss.assert_finite("pretrain loss")
        loss.backward()
        adam.step()
        last_train = loss.item()
    info = {
        "final_train_loss": last_train,
        "val_loss": evaluate(model, dataset.x_val, dataset.y_val),
        "steps": steps_per_epoch(dataset, batch_size) * epochs,
    }
    return model, info
