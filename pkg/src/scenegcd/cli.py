"""Command-line entry points: gen-data, train, eval, analyze, export-embeddings.

Flags override config-file fields, which override defaults. Exit codes:
0 success, 1 config or usage error, 2 numerical abort, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    SyntheticConfig,
    attach_scene_annotations,
    derive_base_scenes,
    gen_synthetic,
    load_dataset,
    load_scene_annotations,
    quadrant_of,
    save_dataset,
)
from .decouple import build_mask_provider
from .evaluate import cluster_acc, export_embeddings, quadrant_report
from .model import predict
from .trainer import (
    NonFiniteLossError,
    TrainConfig,
    model_from_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _read_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: invalid JSON: {exc}") from exc


def _config_digest(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canon.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg_dict = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if "image_size" in cfg_dict:
        cfg_dict["image_size"] = tuple(cfg_dict["image_size"])
    try:
        cfg = SyntheticConfig(**cfg_dict)
    except TypeError as exc:
        raise ValueError(f"invalid synthetic config field: {exc}") from exc
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"output dir {out} is not empty (use --force to overwrite)")
    samples, split = gen_synthetic(cfg)
    manifest = save_dataset(samples, split, out)
    print(f"wrote {len(samples)} samples "
          f"({len(split.labeled)} labeled / {len(split.unlabeled)} unlabeled, "
          f"{len(split.base_classes)}/{len(split.all_classes)} base classes) to {out}")
    print(f"manifest: {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config_from_args(args) -> TrainConfig:
    cfg_dict = _read_json(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "mask_source": args.mask_source,
        "eval_every": args.eval_every,
        "out_dir": args.out_dir,
        "manifest": args.manifest,
    }
    for key, val in overrides.items():
        if val is not None:
            cfg_dict[key] = val
    hp = cfg_dict.setdefault("hp", {})
    if args.lambda1 is not None:
        hp["origin_weight"] = args.lambda1
    if args.lambda2 is not None:
        hp["object_weight"] = args.lambda2
    if args.mode is not None:
        cfg_dict.setdefault("model", {})["branch_mode"] = args.mode
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
    except TypeError as exc:
        raise ValueError(f"invalid train config field: {exc}") from exc
    if cfg.manifest is None:
        raise ValueError("train config needs a dataset manifest path")
    if cfg.out_dir is None:
        raise ValueError("train config needs an output directory")
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    out = Path(cfg.out_dir)
    if out.exists() and (out / "run_manifest.json").exists() and not args.resume:
        raise FileExistsError(
            f"run dir {out} already holds a completed run (resume or pick a new dir)"
        )
    samples, split = load_dataset(cfg.manifest)
    n_classes = len(split.all_classes)
    if cfg.model.n_classes != n_classes:
        raise ValueError(
            f"model.n_classes={cfg.model.n_classes} but the dataset has {n_classes} classes"
        )
    started = time.time()
    artifacts = train(cfg, split, resume_from=args.resume)
    run_manifest = {
        "run_id": _config_digest(cfg.to_dict()),
        "config": cfg.to_dict(),
        "artifacts": {k: v for k, v in artifacts.items()
                      if k in ("metrics_csv", "deviations_csv", "checkpoint")},
        "started": started,
        "finished": time.time(),
    }
    (out / "run_manifest.json").write_text(
        json.dumps(run_manifest, indent=2) + "\n", encoding="utf-8"
    )
    report = artifacts["final_report"]
    if report is not None:
        print(f"final acc_all={report.acc_all:.4f} "
              f"base={report.acc_base} novel={report.acc_novel}")
    print(f"run artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, cfg = model_from_checkpoint(args.checkpoint)
    samples, split = load_dataset(args.manifest)
    if args.annotations:
        # split partitions alias the loaded sample objects, so one attach works
        attach_scene_annotations(samples, load_scene_annotations(args.annotations))
        split.base_scenes = derive_base_scenes(split)
    n_classes = len(split.all_classes)
    if cfg.model.n_classes != n_classes:
        raise ValueError(
            f"checkpoint was trained for {cfg.model.n_classes} classes, "
            f"dataset has {n_classes}"
        )
    provider = build_mask_provider(args.mask_source or cfg.mask_source)
    unlabeled = split.unlabeled
    y_true = np.array([s.object_label for s in unlabeled])
    y_pred = predict(model, unlabeled, provider)
    report = cluster_acc(y_true, y_pred, split.base_classes, n_classes=n_classes)
    print(f"acc_all={report.acc_all:.4f}  acc_base={report.acc_base}  "
          f"acc_novel={report.acc_novel}  (n={report.n_all})")
    annotated = [s.scene_label is not None for s in unlabeled]
    if split.base_scenes is not None and any(annotated):
        quadrants = [quadrant_of(s, split) if s.scene_label is not None else None
                     for s in unlabeled]
        accs, counts = quadrant_report(y_true, y_pred, quadrants, report.matching)
        report.quadrant_acc, report.quadrant_n = accs, counts
        for q, acc in accs.items():
            print(f"  {q.value:<26s} acc={acc:.4f}  n={counts[q]}")
    else:
        print("  (no scene annotations: quadrant table omitted)")
    if args.out:
        report.save_json(args.out)
        print(f"report written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    dev_path = run_dir / "deviations.csv"
    if not dev_path.exists():
        raise FileNotFoundError(f"no deviation log at {dev_path}")
    with dev_path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{dev_path}: empty deviation log")
    epochs = [int(r["epoch"]) for r in rows]
    l1 = [float(r["l1_dev"]) for r in rows]
    mean = [float(r["mean_dev"]) for r in rows]
    out_path = Path(args.out) if args.out else run_dir / "deviation_curve.csv"
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "mean_dev", "l1_dev"))
        for e, m, l in zip(epochs, mean, l1):
            writer.writerow((e, repr(m), repr(l)))
    summary = (
        f"l1_dev: initial={l1[0]:.6g} final={l1[-1]:.6g} "
        f"({'increased' if l1[-1] > l1[0] else 'did not increase'})\n"
        f"mean_dev: range=[{min(mean):.6g}, {max(mean):.6g}] "
        f"width={max(mean) - min(mean):.6g}\n"
    )
    (run_dir / "deviation_summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    print(f"curve data in {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-embeddings
# ---------------------------------------------------------------------------

def cmd_export_embeddings(args) -> int:
    model, cfg = model_from_checkpoint(args.checkpoint)
    samples, split = load_dataset(args.manifest)
    provider = build_mask_provider(args.mask_source or cfg.mask_source)
    subset = split.unlabeled if args.unlabeled_only else samples
    n = export_embeddings(model, subset, args.out, provider)
    print(f"wrote {n} embedding rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenegcd",
        description="Scene-aware generalized category discovery at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--config", help="JSON file with synthetic-config fields")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--config", help="JSON file with train-config fields")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--out-dir", help="run output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda1", type=float, help="original-image branch weight")
    p.add_argument("--lambda2", type=float, help="object-image branch weight")
    p.add_argument("--mode", choices=("dual", "object_only", "original_only"))
    p.add_argument("--mask-source", choices=("oracle", "file", "heuristic"))
    p.add_argument("--eval-every", type=int, metavar="N")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", help="scene annotation file for the quadrant table")
    p.add_argument("--mask-source", choices=("oracle", "file", "heuristic"))
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="summarize a run's feature-deviation log")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", help="deviation curve CSV path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-embeddings", help="dump object-branch projections")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-source", choices=("oracle", "file", "heuristic"))
    p.add_argument("--unlabeled-only", action="store_true")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
