"""Comparison methods: one-shot magnitude pruning with a frozen mask (ASP),
per-layer unstructured ADMM, and the plain dense fine-tune.

ASP prunes the pretrained weights once to the grouped pattern and then
fine-tunes with gradients and updates suppressed outside the frozen
mask.  The unstructured variant reuses the ADMM engine unchanged, with
the grouped projection swapped for per-layer top-half magnitude
selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .admm import ADMMState, TrainingDiverged, init_admm
from .autodiff import Adam, NonFiniteError
from .metrics import MetricLog
from .models import LayerPolicy
from .nxm import SparsityPattern, extract_mask
from .tasks import Dataset, batch_stream, evaluate, steps_per_epoch


@dataclass(frozen=True)
class FrozenMask:
    """Immutable per-layer retention masks fixed at prune time."""

    masks: Mapping[str, np.ndarray]

    @staticmethod
    def of(masks: dict[str, np.ndarray]) -> "FrozenMask":
        frozen = {}
        for name, m in masks.items():
            m = m.copy()
            m.setflags(write=False)
            frozen[name] = m
        return FrozenMask(MappingProxyType(frozen))


def asp_prune(model, policy: LayerPolicy, pattern: SparsityPattern) -> FrozenMask:
    """One-shot magnitude prune of the constrained layers, in place.

    The mask is extracted from (and identical to the warm-start mask of)
    the same pretrained weights, then frozen for the rest of training.
    """
    masks: dict[str, np.ndarray] = {}
    for name in policy.constrained_names:
        w = model.params[name].data
        mask = extract_mask(w, pattern)
        model.params[name].data = np.where(mask, w, 0.0)
        masks[name] = mask
    return FrozenMask.of(masks)


def masked_finetune_step(model, frozen: FrozenMask, adam: Adam, x: np.ndarray, y: np.ndarray) -> float:
    """One Adam step on the plain task loss with the mask enforced.

    Gradients outside the mask are zeroed before the update and the
    weights re-zeroed after it, so masked-out entries remain exact 0.0.
    With an all-ones mask this is bit-identical to a vanilla Adam step.
    """
    adam.zero_grad()
    loss = model.loss(x, y)
    loss.assert_finite("task loss")
    loss.backward()
    for name, mask in frozen.masks.items():
        grad = model.params[name].grad
        if grad is not None:
            model.params[name].grad = np.where(mask, grad, 0.0)
    adam.step()
    for name, mask in frozen.masks.items():
        model.params[name].data = np.where(mask, model.params[name].data, 0.0)
    return loss.item()


def masked_finetune(
    model,
    frozen: FrozenMask,
    dataset: Dataset,
    adam: Adam,
    *,
    epochs: int,
    batch_size: int,
    seed: int,
    method: str = "asp",
    on_step=None,
) -> MetricLog:
    """Masked fine-tune with per-epoch validation of the (already sparse) model."""
    spe = steps_per_epoch(dataset, batch_size)
    log = MetricLog()
    step = 0
    for epoch, xb, yb in batch_stream(dataset, batch_size, epochs, seed):
        try:
            loss = masked_finetune_step(model, frozen, adam, xb, yb)
        except NonFiniteError as err:
            raise TrainingDiverged(f"diverged at step {step + 1}: {err}", log) from err
        step += 1
        log.append(step=step, epoch=epoch, train_loss=loss, method=method, seed=seed)
        if on_step is not None:
            on_step(step, model)
        if step % spe == 0:
            val = evaluate(model, dataset.x_val, dataset.y_val)
            log.append(step=step, epoch=epoch, val_loss_pruned=val, method=method, seed=seed)
    return log


def dense_finetune(
    model,
    dataset: Dataset,
    adam: Adam,
    *,
    epochs: int,
    batch_size: int,
    seed: int,
    method: str = "dense",
    on_step=None,
) -> MetricLog:
    """Vanilla Adam fine-tune on the task loss; the unconstrained reference."""
    spe = steps_per_epoch(dataset, batch_size)
    log = MetricLog()
    step = 0
    for epoch, xb, yb in batch_stream(dataset, batch_size, epochs, seed):
        adam.zero_grad()
        try:
            loss = model.loss(xb, yb)
            loss.assert_finite("task loss")
            loss.backward()
            adam.step()
        except NonFiniteError as err:
            raise TrainingDiverged(f"diverged at step {step + 1}: {err}", log) from err
        step += 1
        log.append(step=step, epoch=epoch, train_loss=loss.item(), method=method, seed=seed)
        if on_step is not None:
            on_step(step, model)
        if step % spe == 0:
            val = evaluate(model, dataset.x_val, dataset.y_val)
            log.append(step=step, epoch=epoch, val_loss_pruned=val, method=method, seed=seed)
    return log


class MagnitudeProjector:
    """Per-layer unstructured projection: keep the top keep_fraction of
    entries by magnitude (lower flat index wins ties), zero the rest."""

    def __init__(self, keep_fraction: float = 0.5):
        if not 0.0 < keep_fraction < 1.0:
            raise ValueError(f"keep fraction must be in (0, 1), got {keep_fraction}")
        self.keep_fraction = keep_fraction

    def keep_count(self, size: int) -> int:
        return math.ceil(self.keep_fraction * size)

    def validate(self, name: str, w: np.ndarray) -> None:
        if w.size < 1:
            raise ValueError(f"empty tensor {name!r}")

    def mask(self, w: np.ndarray) -> np.ndarray:
        flat = np.abs(np.asarray(w, dtype=np.float64)).ravel()
        order = np.argsort(-flat, kind="stable")
        mask = np.zeros(flat.shape, dtype=bool)
        mask[order[: self.keep_count(flat.size)]] = True
        return mask.reshape(np.asarray(w).shape)

    def project(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        return np.where(self.mask(w), w, 0.0)

    def compliant(self, w: np.ndarray) -> bool:
        return int(np.count_nonzero(w)) <= self.keep_count(np.asarray(w).size)


def unstructured_admm_prune(model, policy: LayerPolicy, rho: float, sparsity: float = 0.5) -> ADMMState:
    """Configure the ADMM engine with per-layer unstructured projection.

    ``sparsity`` is the fraction removed per layer; the run itself uses
    the same engine entry points as the grouped variant.
    """
    if not 0.0 < sparsity < 1.0:
        raise ValueError(f"sparsity must be in (0, 1), got {sparsity}")
    projector = MagnitudeProjector(keep_fraction=1.0 - sparsity)
    return init_admm(model, policy, None, rho, projector=projector)
