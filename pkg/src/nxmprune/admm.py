"""ADMM fine-tuning engine for group-sparse weight constraints.

Alternates three moves per iteration: a fixed number of Adam steps on
the task loss augmented with quadratic coupling penalties (the
performance-promoting sub-problem), an analytic magnitude projection
refreshing each sparse target Z from W + U (the sparsity-promoting
sub-problem), and the dual update U += W - Z.  The run also performs a
non-destructive hard-prune evaluation of a projected copy of the
weights at every epoch boundary, and finishes with a terminal
projection producing a fully compliant network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytics import mean_mask_similarity
from .autodiff import Adam, NonFiniteError, Tensor, squared_distance
from .metrics import MetricLog
from .models import LayerPolicy
from .nxm import SparsityPattern, check_compliance, extract_mask, project_nxm
from .tasks import Dataset, batch_stream, evaluate, steps_per_epoch


class TrainingDiverged(RuntimeError):
    """The loss or a gradient became non-finite; partial records attached."""

    def __init__(self, message: str, log: MetricLog | None = None):
        super().__init__(message)
        self.log = log if log is not None else MetricLog()


class NxMProjector:
    """Projection onto the grouped at-most-m-of-n constraint."""

    def __init__(self, pattern: SparsityPattern):
        self.pattern = pattern

    def validate(self, name: str, w: np.ndarray) -> None:
        if w.ndim != 2:
            raise ValueError(f"constrained tensor {name!r} must be a matrix, got shape {w.shape}")
        if w.shape[-1] % self.pattern.n != 0:
            raise ValueError(
                f"constrained tensor {name!r} input dimension {w.shape[-1]} "
                f"is not divisible by group size {self.pattern.n}"
            )

    def mask(self, w: np.ndarray) -> np.ndarray:
        return extract_mask(w, self.pattern)

    def project(self, w: np.ndarray) -> np.ndarray:
        return project_nxm(w, self.pattern)

    def compliant(self, w: np.ndarray) -> bool:
        return check_compliance(w, self.pattern)


@dataclass
class ADMMState:
    """Auxiliary (z) and dual (u) variables per constrained tensor.

    z is always a projection output and therefore always compliant; u
    starts at zero and integrates the constraint violation w - z.  The
    masks record the support chosen by the most recent projection.
    """

    rho: float
    projector: NxMProjector
    z: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    k: int = 0

    @property
    def constrained_names(self) -> tuple[str, ...]:
        return tuple(self.z)


@dataclass(frozen=True)
class ADMMSchedule:
    """How long to run and how often to project."""

    total_epochs: int
    steps_per_iteration: int = 80
    min_iterations: int = 10
    prune_eval_each_epoch: bool = True
    reset_adam_per_iteration: bool = False

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.steps_per_iteration < 1:
            raise ValueError("steps_per_iteration must be >= 1")
        if self.min_iterations < 1:
            raise ValueError("min_iterations must be >= 1")


@dataclass
class ResidualRecord:
    """Per-layer primal gap ||w - z||_F, raw and relative to ||w||_F."""

    iteration: int
    absolute: dict[str, float]
    relative: dict[str, float]

    @property
    def max_relative(self) -> float:
        return max(self.relative.values())

    @property
    def mean_relative(self) -> float:
        return float(np.mean(list(self.relative.values())))


@dataclass
class ADMMRunResult:
    log: MetricLog
    mask_history: list[dict[str, np.ndarray]] = field(default_factory=list)
    residuals: list[ResidualRecord] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    similarities: list[float] = field(default_factory=list)


def init_admm(model, policy: LayerPolicy, pattern: SparsityPattern | None, rho: float, projector=None) -> ADMMState:
    """Warm-start state: z = projection of the current weights, u = 0, k = 0.

    rho = 0 is accepted as the degenerate no-penalty configuration (the
    run then reduces exactly to plain fine-tuning); negative rho is
    rejected.  Either a pattern or a ready projector must be supplied.
    """
    if rho < 0:
        raise ValueError(f"penalty coefficient must be >= 0, got {rho}")
    if projector is None:
        if pattern is None:
            raise ValueError("either a sparsity pattern or a projector is required")
        projector = NxMProjector(pattern)
    z: dict[str, np.ndarray] = {}
    u: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for name in policy.constrained_names:
        if name not in model.params:
            raise ValueError(f"policy names unknown tensor {name!r}")
        w = model.params[name].data
        projector.validate(name, w)
        z[name] = projector.project(w)
        u[name] = np.zeros_like(w)
        masks[name] = projector.mask(w)
    return ADMMState(rho=rho, projector=projector, z=z, u=u, masks=masks)


def penalty_term(model, state: ADMMState) -> Tensor:
    """Differentiable sum of (rho/2) * ||w - (z - u)||_F^2 over constrained layers.

    The gradient with respect to each w is exactly rho * (w - (z - u)).
    """
    half_rho = state.rho / 2.0
    total: Tensor | None = None
    for name in state.constrained_names:
        target = state.z[name] - state.u[name]
        term = squared_distance(model.params[name], target) * half_rho
        total = term if total is None else total + term
    if total is None:
        raise ValueError("state has no constrained layers")
    return total


def penalty_gradient(state: ADMMState, name: str, w: np.ndarray) -> np.ndarray:
    """Closed form rho * (w - (z - u)), bit-identical to autodiff of penalty_term."""
    return state.rho * (w - (state.z[name] - state.u[name]))


def augmented_loss(model, state: ADMMState, x: np.ndarray, y: np.ndarray) -> tuple[Tensor, float]:
    """Task loss plus coupling penalties; returns (total, task loss value)."""
    task = model.loss(x, y)
    total = task + penalty_term(model, state)
    total.assert_finite("augmented loss")
    return total, task.item()


def sparsity_step(model, state: ADMMState) -> None:
    """Refresh each sparse target: z = projection of (w + u)."""
    for name in state.constrained_names:
        shifted = model.params[name].data + state.u[name]
        state.masks[name] = state.projector.mask(shifted)
        state.z[name] = np.where(state.masks[name], shifted, 0.0)


def dual_step(model, state: ADMMState) -> None:
    """Integrate the remaining constraint violation: u += w - z; advance k."""
    for name in state.constrained_names:
        state.u[name] += model.params[name].data - state.z[name]
    state.k += 1


def residual_record(model, state: ADMMState) -> ResidualRecord:
    absolute: dict[str, float] = {}
    relative: dict[str, float] = {}
    for name in state.constrained_names:
        w = model.params[name].data
        gap = float(np.linalg.norm(w - state.z[name]))
        norm = float(np.linalg.norm(w))
        absolute[name] = gap
        relative[name] = gap / norm if norm > 0 else 0.0
    return ResidualRecord(iteration=state.k, absolute=absolute, relative=relative)


def pruned_validation_loss(model, names, projector, x: np.ndarray, y: np.ndarray) -> float:
    """Validation loss of a hard-pruned copy; training weights untouched."""
    saved = {name: model.params[name].data for name in names}
    try:
        for name in names:
            model.params[name].data = projector.project(saved[name])
        return evaluate(model, x, y)
    finally:
        for name in names:
            model.params[name].data = saved[name]


def run_admm_finetune(
    model,
    state: ADMMState,
    schedule: ADMMSchedule,
    dataset: Dataset,
    adam: Adam,
    *,
    batch_size: int,
    seed: int,
    method: str = "admm-nxm",
    on_step=None,
) -> ADMMRunResult:
    """Alternating fine-tune: Adam steps on the augmented loss, then a
    projection and dual update every ``steps_per_iteration`` steps.

    Logs the task/augmented loss every step, the residual and mask
    similarity at every iteration boundary, and the hard-pruned
    validation loss at every epoch end.  A non-finite loss or gradient
    aborts with the partial log attached to the exception.
    """
    spe = steps_per_epoch(dataset, batch_size)
    if spe < 1:
        raise ValueError("batch size exceeds training set size")
    planned = (schedule.total_epochs * spe) // schedule.steps_per_iteration
    if planned < schedule.min_iterations:
        raise ValueError(
            f"schedule yields {planned} ADMM iterations "
            f"({schedule.total_epochs} epochs x {spe} steps), fewer than "
            f"min_iterations={schedule.min_iterations}"
        )
    result = ADMMRunResult(log=MetricLog())
    log = result.log
    names = state.constrained_names
    step = 0
    for epoch, xb, yb in batch_stream(dataset, batch_size, schedule.total_epochs, seed):
        adam.zero_grad()
        try:
            total, task_value = augmented_loss(model, state, xb, yb)
            total.backward()
            adam.step()
        except NonFiniteError as err:
            raise TrainingDiverged(f"diverged at step {step + 1}: {err}", log) from err
        step += 1
        log.append(step=step, epoch=epoch, k=state.k, train_loss=task_value,
                   aug_loss=total.item(), method=method, seed=seed)
        if on_step is not None:
            on_step(step, model)
        if step % schedule.steps_per_iteration == 0:
            previous_masks = dict(state.masks)
            sparsity_step(model, state)
            dual_step(model, state)
            similarity = mean_mask_similarity(previous_masks, state.masks)
            record = residual_record(model, state)
            result.residuals.append(record)
            result.similarities.append(similarity)
            result.mask_history.append({name: state.masks[name].copy() for name in names})
            log.append(step=step, epoch=epoch, k=state.k, residual=record.max_relative,
                       similarity=similarity, method=method, seed=seed)
            if schedule.reset_adam_per_iteration:
                adam.reset_moments()
        if step % spe == 0 and schedule.prune_eval_each_epoch:
            val = pruned_validation_loss(model, names, state.projector, dataset.x_val, dataset.y_val)
            result.val_losses.append(val)
            log.append(step=step, epoch=epoch, k=state.k, val_loss_pruned=val,
                       method=method, seed=seed)
    return result


def finalize(model, state: ADMMState, *, adopt_z: bool = False):
    """Make every constrained weight compliant.

    Default projects the trained weights (keeping the latest task
    gradient information); ``adopt_z=True`` copies the auxiliary
    variables instead, which coincides at convergence.
    """
    for name in state.constrained_names:
        if adopt_z:
            model.params[name].data = state.z[name].copy()
        else:
            model.params[name].data = state.projector.project(model.params[name].data)
    return model
