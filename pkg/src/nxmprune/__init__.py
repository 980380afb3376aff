"""ADMM fine-tuning for NxM semi-structured weight sparsity, at desk scale."""

from .admm import (
    ADMMSchedule,
    ADMMState,
    ResidualRecord,
    TrainingDiverged,
    augmented_loss,
    dual_step,
    finalize,
    init_admm,
    run_admm_finetune,
    sparsity_step,
)
from .analytics import PresenceHistogram, decay_report, mask_similarity
from .autodiff import Adam, NonFiniteError, Tensor
from .baselines import FrozenMask, asp_prune, dense_finetune, masked_finetune, unstructured_admm_prune
from .codec import CompressedNxM, compress, decompress
from .config import RunConfig, load_config, preset
from .experiment import run_experiment, sweep
from .metrics import MetricLog
from .models import LayerPolicy, ModelConfig, ToyMLP, ToyTransformer, build_model, build_policy
from .nxm import SparsityPattern, check_compliance, extract_mask, project_nxm
from .tasks import Dataset, TaskSpec, generate_task, pretrain_dense

__version__ = "0.1.0"

__all__ = [
    "ADMMSchedule",
    "ADMMState",
    "Adam",
    "CompressedNxM",
    "Dataset",
    "FrozenMask",
    "LayerPolicy",
    "MetricLog",
    "ModelConfig",
    "NonFiniteError",
    "PresenceHistogram",
    "ResidualRecord",
    "RunConfig",
    "SparsityPattern",
    "TaskSpec",
    "Tensor",
    "ToyMLP",
    "ToyTransformer",
    "TrainingDiverged",
    "asp_prune",
    "augmented_loss",
    "build_model",
    "build_policy",
    "check_compliance",
    "compress",
    "decay_report",
    "decompress",
    "dense_finetune",
    "dual_step",
    "extract_mask",
    "finalize",
    "generate_task",
    "init_admm",
    "load_config",
    "mask_similarity",
    "masked_finetune",
    "preset",
    "pretrain_dense",
    "project_nxm",
    "run_admm_finetune",
    "run_experiment",
    "sparsity_step",
    "sweep",
    "unstructured_admm_prune",
]
