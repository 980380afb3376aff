"""Command-line entry point.

Subcommands: pretrain, finetune, sweep, analyze, export.  Configuration
comes from a single JSON document whose keys mirror RunConfig field
names; any field can be overridden with a --key=value flag (dotted keys
reach into the nested task/model documents), and --preset selects a
named starting configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import codec
from .autodiff import parameters_state
from .config import apply_overrides, config_from_dict, load_config, preset
from .experiment import run_experiment, sweep
from .metrics import read_csv
from .models import load_checkpoint, save_checkpoint
from .nxm import SparsityPattern, check_compliance
from .tasks import pretrain_dense, pretrain_spec


def _split_overrides(extras: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in extras:
        if not item.startswith("--") or "=" not in item:
            raise SystemExit(f"unrecognized argument {item!r}; overrides look like --key=value")
        key, _, value = item[2:].partition("=")
        overrides[key] = value
    return overrides


def _resolve_config(args, extras: list[str]):
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    elif args.preset:
        doc = preset(args.preset).to_dict()
    else:
        doc = {}
    doc = apply_overrides(doc, _split_overrides(extras))
    sweep_grid = doc.pop("sweep", None)
    return config_from_dict(doc), sweep_grid


def _add_config_flags(parser):
    parser.add_argument("--config", help="JSON config file (keys mirror RunConfig fields)")
    parser.add_argument("--preset", choices=("reference", "low-resource", "high-resource"),
                        help="named starting configuration")


def cmd_pretrain(args, extras):
    cfg, _ = _resolve_config(args, extras)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, info = pretrain_dense(
        pretrain_spec(cfg.task, cfg.pretrain_samples),
        cfg.model,
        epochs=cfg.pretrain_epochs,
        seed=cfg.seed,
        lr=cfg.pretrain_lr,
        batch_size=cfg.batch_size,
    )
    path = out_dir / "pretrained.nxmw"
    save_checkpoint(path, parameters_state(model.params))
    (out_dir / "pretrain_summary.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"pretrained checkpoint -> {path}")
    print(f"final train loss {info['final_train_loss']:.6g}, broad val loss {info['val_loss']:.6g}")
    return 0


def cmd_finetune(args, extras):
    cfg, _ = _resolve_config(args, extras)
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if summary["status"] == "ok" else 1


def cmd_sweep(args, extras):
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    elif args.preset:
        doc = preset(args.preset).to_dict()
    else:
        raise SystemExit("sweep needs --config or --preset")
    doc = apply_overrides(doc, _split_overrides(extras))
    grid = doc.pop("sweep", None)
    if not grid:
        raise SystemExit('sweep config needs a "sweep" key, e.g. {"sweep": {"rho": [0.001, 0.01]}}')
    out_dir = doc.get("output_dir", "runs/sweep")
    rows = sweep(doc, grid, out_dir)
    for row in rows:
        best = row.get("best_val_loss")
        best_txt = f"{best:.6g}" if best is not None else "-"
        print(f"{row['cell']:<40s} {row['status']:<8s} best_val={best_txt}")
    print(f"summary -> {Path(out_dir) / 'sweep.csv'}")
    return 0


def cmd_analyze(args, extras):
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        print(json.dumps(summary, indent=2, sort_keys=True))
    rows = read_csv(run_dir / "metrics.csv") if (run_dir / "metrics.csv").exists() else []
    sims = [r["similarity"] for r in rows if r.get("similarity") is not None]
    residuals = [r["residual"] for r in rows if r.get("residual") is not None]
    if sims:
        line = f"mask similarity: mean {np.mean(sims):.6g}"
        if len(sims) > 1:
            line += f", mean excl. first {np.mean(sims[1:]):.6g}"
        print(line)
    if residuals:
        print(f"relative residual: first {residuals[0]:.6g}, last {residuals[-1]:.6g}")
    decay_path = run_dir / "decay.csv"
    if decay_path.exists():
        print("magnitude decay by mask presence count:")
        print(decay_path.read_text().rstrip())
    return 0


def cmd_export(args, extras):
    pattern = SparsityPattern(args.n, args.m)
    params = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []
    for name, w in sorted(params.items()):
        if w.ndim == 2 and w.shape[-1] % pattern.n == 0 and check_compliance(w, pattern):
            path = out_dir / f"{name}.nxmc"
            codec.save(path, codec.compress(w, pattern))
            written.append(name)
        else:
            skipped.append(name)
    print(f"exported {len(written)} tensors to {out_dir} ({pattern} pattern)")
    if skipped:
        print(f"skipped (not {pattern}-compliant): {', '.join(skipped)}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nxmprune",
        description="ADMM fine-tuning for NxM semi-structured sparsity on toy tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the dense checkpoint on the broad task")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="run one configured fine-tune")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="run a config grid and merge the summaries")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="report metrics of a finished run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export", help="compress a compliant checkpoint to the packed format")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--m", type=int, default=2)
    p.set_defaults(func=cmd_export)

    args, extras = parser.parse_known_args(argv)
    return args.func(args, extras)


if __name__ == "__main__":
    sys.exit(main())
