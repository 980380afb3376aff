"""End-to-end experiment execution: one configured run, or a grid of them.

A run writes into its output directory: the canonical config echo, the
metrics CSV, the final checkpoint, a compressed export of compliant
constrained tensors, the decay report, and a summary JSON with the best
observed validation loss.  Every artifact is a deterministic function of
the config, so reruns produce byte-identical files.  A diverged run
keeps its partial metrics and is marked as such instead of aborting a
surrounding sweep.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from . import codec
from .admm import ADMMSchedule, TrainingDiverged, finalize, init_admm, run_admm_finetune
from .analytics import decay_report
from .autodiff import Adam, parameters_state
from .baselines import asp_prune, dense_finetune, masked_finetune, unstructured_admm_prune
from .config import RunConfig
from .metrics import MetricLog
from .models import build_model, build_policy, load_checkpoint, load_state, save_checkpoint
from .nxm import SparsityPattern, check_compliance
from .tasks import evaluate, generate_task, pretrain_dense, pretrain_spec


def ensure_checkpoint(cfg: RunConfig, out_dir: Path) -> dict[str, np.ndarray]:
    """Load the configured checkpoint, or pretrain one into the run directory."""
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    model, info = pretrain_dense(
        pretrain_spec(cfg.task, cfg.pretrain_samples),
        cfg.model,
        epochs=cfg.pretrain_epochs,
        seed=cfg.seed,
        lr=cfg.pretrain_lr,
        batch_size=cfg.batch_size,
    )
    state = parameters_state(model.params)
    save_checkpoint(out_dir / "pretrained.nxmw", state)
    (out_dir / "pretrain_summary.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return state


def _export_compressed(out_dir: Path, model, names, pattern: SparsityPattern) -> list[str]:
    exported = []
    comp_dir = out_dir / "compressed"
    for name in names:
        w = model.params[name].data
        if w.shape[-1] % pattern.n == 0 and check_compliance(w, pattern):
            comp_dir.mkdir(exist_ok=True)
            codec.save(comp_dir / f"{name}.nxmc", codec.compress(w, pattern))
            exported.append(name)
    return exported


def run_experiment(cfg: RunConfig) -> dict:
    """Execute one configured run; returns the summary dict it also writes."""
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())

    dataset = generate_task(cfg.task)
    initial = ensure_checkpoint(cfg, out_dir)
    model = build_model(cfg.model, seed=0)
    load_state(model, initial)
    policy = build_policy(model)
    pattern = SparsityPattern(cfg.n, cfg.m)
    adam = Adam(model.params, lr=cfg.lr)

    summary: dict = {"method": cfg.method, "seed": cfg.seed, "status": "ok"}
    # Dense-checkpoint reference on the fine-tune task, before any pruning.
    summary["checkpoint_val_loss"] = evaluate(model, dataset.x_val, dataset.y_val)
    log = MetricLog()
    mask_history = []
    try:
        if cfg.method == "dense":
            log = dense_finetune(model, dataset, adam, epochs=cfg.epochs,
                                 batch_size=cfg.batch_size, seed=cfg.seed)
        elif cfg.method == "asp":
            frozen = asp_prune(model, policy, pattern)
            summary["initial_val_loss_pruned"] = evaluate(model, dataset.x_val, dataset.y_val)
            log = masked_finetune(model, frozen, dataset, adam, epochs=cfg.epochs,
                                  batch_size=cfg.batch_size, seed=cfg.seed)
        else:
            if cfg.method == "admm-nxm":
                state = init_admm(model, policy, pattern, cfg.rho)
            else:
                state = unstructured_admm_prune(model, policy, cfg.rho, cfg.sparsity)
            schedule = ADMMSchedule(
                total_epochs=cfg.epochs,
                steps_per_iteration=cfg.steps_per_iteration,
                min_iterations=cfg.min_iterations,
                reset_adam_per_iteration=cfg.reset_adam_per_iteration,
            )
            result = run_admm_finetune(model, state, schedule, dataset, adam,
                                       batch_size=cfg.batch_size, seed=cfg.seed,
                                       method=cfg.method)
            log = result.log
            mask_history = result.mask_history
            finalize(model, state, adopt_z=cfg.adopt_z)
            summary["iterations"] = state.k
            summary["finalize_adopted_z"] = cfg.adopt_z
            if result.residuals:
                summary["final_max_rel_residual"] = result.residuals[-1].max_relative
            if result.similarities:
                summary["mean_similarity"] = float(np.mean(result.similarities))
                summary["mean_similarity_excl_first"] = (
                    float(np.mean(result.similarities[1:])) if len(result.similarities) > 1 else None
                )
    except TrainingDiverged as err:
        log = err.log
        summary["status"] = "diverged"
        summary["error"] = str(err)

    log.write_csv(out_dir / "metrics.csv")
    if summary["status"] == "ok":
        val_history = log.column("val_loss_pruned")
        summary["final_val_loss"] = evaluate(model, dataset.x_val, dataset.y_val)
        summary["best_val_loss"] = (
            min(val_history + [summary["final_val_loss"]]) if val_history else summary["final_val_loss"]
        )
        summary["final_train_loss"] = log.column("train_loss")[-1] if log.column("train_loss") else None
        save_checkpoint(out_dir / "final.nxmw", parameters_state(model.params))
        summary["compressed_tensors"] = _export_compressed(out_dir, model, policy.constrained_names, pattern)
        if mask_history:
            histogram = decay_report(initial, parameters_state(model.params), mask_history)
            _write_decay(out_dir / "decay.csv", histogram)
            np.savez(
                out_dir / "mask_presence.npz",
                total_iterations=np.asarray(histogram.total_iterations),
                **{f"count_{c}": np.asarray(p) for c, p in histogram.bucket_counts.items()},
            )
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _write_decay(path: Path, histogram) -> None:
    lines = ["presence_count,population,mean_ratio"]
    for count, population, ratio in histogram.to_rows():
        lines.append(f"{count},{population},{ratio:.17g}")
    path.write_text("\n".join(lines) + "\n")


def _cell_name(cell: dict) -> str:
    return "_".join(f"{k.replace('.', '-')}={v:g}" if isinstance(v, float) else f"{k.replace('.', '-')}={v}"
                    for k, v in cell.items())


def sweep(base_doc: dict, grid: dict[str, list], output_dir) -> list[dict]:
    """Run the cartesian product of the grid over the base config document.

    Grid keys use the same (optionally dotted) names as CLI overrides.
    Per-cell failures are recorded, not propagated.  Returns the summary
    rows, sorted by best validation loss with failed cells last, and
    writes them to sweep.csv in the output directory.
    """
    from .config import apply_overrides, config_from_dict

    if not grid:
        raise ValueError("empty sweep grid")
    out_root = Path(output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    rows: list[dict] = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        name = _cell_name(cell)
        doc = apply_overrides(base_doc, {k: json.dumps(v) for k, v in cell.items()})
        doc["output_dir"] = str(out_root / name)
        row = {"cell": name, **cell}
        try:
            summary = run_experiment(config_from_dict(doc))
            row["status"] = summary["status"]
            for key in ("best_val_loss", "final_val_loss", "mean_similarity",
                        "mean_similarity_excl_first", "final_max_rel_residual"):
                row[key] = summary.get(key)
        except Exception as err:  # config errors etc. stay isolated to the cell
            row["status"] = "failed"
            row["error"] = str(err)
        rows.append(row)
    rows.sort(key=lambda r: (r["status"] != "ok", r.get("best_val_loss") if r.get("best_val_loss") is not None else float("inf")))
    _write_sweep_csv(out_root / "sweep.csv", rows, keys)
    return rows


def _write_sweep_csv(path: Path, rows: list[dict], keys: list[str]) -> None:
    columns = ["cell", *keys, "status", "best_val_loss", "final_val_loss",
               "mean_similarity", "mean_similarity_excl_first", "final_max_rel_residual"]
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row.get(col)
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(f"{v:.17g}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
