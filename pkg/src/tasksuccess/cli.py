"""Command-line experiment harness.

Subcommands: ``synth``, ``train``, ``eval``, ``ablate``, ``compare``. Run
configurations are strict JSON documents (unknown keys are rejected). Exit
codes: 0 success, 2 usage/input error, 3 numerical failure.

Generated datasets referenced by config can be cached across commands under
the directory named by the ``SCL_CACHE_DIR`` environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import evaluation, plots, synth
from .backbones import BackboneConfig
from .data import TaskDataset, export_dataset, load_manifest
from .exceptions import (
    CapabilityError,
    ConfigurationError,
    IngestionError,
    NumericalError,
    ShapeError,
    TaskSuccessError,
    ValidationError,
)
from .models import ARCH_IDS, HeadConfig, build_model, load_checkpoint
from .training import LossWeights, TrainConfig, train_architecture

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

_INPUT_ERRORS = (
    ValidationError,
    IngestionError,
    ConfigurationError,
    CapabilityError,
    ShapeError,
    FileNotFoundError,
)


# ---------------------------------------------------------------------------
# Config parsing (strict: unknown keys rejected)
# ---------------------------------------------------------------------------


def _check_keys(section: dict, allowed: set[str], where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    try:
        config = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise ValidationError(f"config {path} must be a JSON object")
    _check_keys(
        config,
        {"dataset", "arch", "train", "eval", "synth", "ablate", "compare",
         "backbone", "heads"},
        "config",
    )
    return config


def parse_synth_config(section: dict, seed: int | None = None) -> synth.SynthConfig:
    _check_keys(
        section,
        {"num_demos_train", "num_demos_test", "frames_per_demo", "image_size",
         "task_rule", "shift", "success_tail", "noise_std", "seed", "task_id"},
        "synth section",
    )
    shift_section = section.get("shift", {})
    _check_keys(
        shift_section,
        {"background_palette_source", "background_palette_target",
         "distractor_count_source", "distractor_count_target"},
        "synth.shift section",
    )
    shift_kwargs = {
        k: [tuple(c) for c in v] if k.startswith("background") else v
        for k, v in shift_section.items()
    }
    kwargs = {k: v for k, v in section.items() if k != "shift"}
    if "frames_per_demo" in kwargs:
        kwargs["frames_per_demo"] = tuple(kwargs["frames_per_demo"])
    if "image_size" in kwargs:
        kwargs["image_size"] = tuple(kwargs["image_size"])
    cfg = synth.SynthConfig(**kwargs, shift_spec=synth.ShiftSpec(**shift_kwargs))
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def parse_train_config(section: dict, seed: int | None = None) -> TrainConfig:
    allowed = {
        "batch_size", "epochs", "optimizer", "learning_rate", "split_ratio",
        "seed", "loss_weights", "grl_lambda", "early_stopping",
        "adversarial_epochs", "split_by", "num_threads",
    }
    _check_keys(section, allowed, "train section")
    weights_section = section.get("loss_weights", {})
    _check_keys(weights_section, {"w_cls", "w_time", "w_dom"}, "train.loss_weights")
    kwargs = {k: v for k, v in section.items() if k != "loss_weights"}
    cfg = TrainConfig(**kwargs, loss_weights=LossWeights(**weights_section))
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def parse_backbone_config(section: dict) -> BackboneConfig:
    allowed = {"channels", "kernel_size", "feature_dim", "in_channels", "input_hw",
               "extractor"}
    _check_keys(section, allowed, "backbone section")
    kwargs = dict(section)
    if "channels" in kwargs:
        kwargs["channels"] = tuple(kwargs["channels"])
    if "input_hw" in kwargs:
        kwargs["input_hw"] = tuple(kwargs["input_hw"])
    cfg = BackboneConfig(**kwargs)
    cfg.validate()
    return cfg


def parse_head_config(section: dict) -> HeadConfig:
    allowed = {
        "hidden_dim", "nasnet_trunk_dims", "seq_hidden_dim", "seq_attn_dim",
        "transformer_dim", "transformer_heads", "transformer_layers",
        "transformer_ff_dim", "grl_lambda",
    }
    _check_keys(section, allowed, "heads section")
    kwargs = dict(section)
    if "nasnet_trunk_dims" in kwargs:
        kwargs["nasnet_trunk_dims"] = tuple(kwargs["nasnet_trunk_dims"])
    cfg = HeadConfig(**kwargs)
    cfg.validate()
    return cfg


def _require(config: dict, key: str) -> dict:
    if key not in config:
        raise ValidationError(f"config is missing the required {key!r} section")
    return config[key]


def resolve_dataset(config: dict, seed: int | None = None) -> TaskDataset:
    """Load the dataset named by the config: a manifest path or a synth spec.

    Synth datasets are materialized under ``SCL_CACHE_DIR`` (if set) keyed by a
    digest of their configuration, so repeated commands reuse the same frames
    and exercise the manifest ingestion path.
    """
    section = _require(config, "dataset")
    _check_keys(section, {"manifest", "synth"}, "dataset section")
    if ("manifest" in section) == ("synth" in section):
        raise ValidationError("dataset section needs exactly one of 'manifest' or 'synth'")
    if "manifest" in section:
        return load_manifest(section["manifest"])
    cfg = parse_synth_config(section["synth"], seed)
    cache_root = os.environ.get("SCL_CACHE_DIR")
    if not cache_root:
        return synth.generate(cfg)
    digest = hashlib.sha256(
        json.dumps(asdict(cfg), sort_keys=True, default=list).encode()
    ).hexdigest()[:16]
    cache_dir = Path(cache_root) / f"synth_{digest}"
    if not (cache_dir / "dataset.json").exists():
        dataset = synth.generate(cfg)
        export_dataset(dataset, cache_dir, force=True)
        return dataset
    return load_manifest(cache_dir)


def _prepare_out_dir(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ValidationError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    section = config.get("synth") or _require(config, "dataset").get("synth")
    if section is None:
        raise ValidationError("synth command needs a 'synth' section in the config")
    cfg = parse_synth_config(section, args.seed)
    out = _prepare_out_dir(args.out, args.force)
    dataset = synth.generate(cfg)
    export_dataset(dataset, out, force=True)
    n_train = len(dataset.train_demos)
    n_test = len(dataset.test_demos)
    frames = sum(d.length_j for d in dataset.train_demos + dataset.test_demos)
    pos = sum(int(d.labels.sum()) for d in dataset.train_demos + dataset.test_demos)
    print(f"wrote {dataset.task_id}: {n_train} train + {n_test} test demos, "
          f"{frames} frames ({pos / frames:.1%} success) -> {out}")
    return EXIT_OK


def _build_model_from_config(config: dict, arch: str, seed: int):
    backbone_cfg = parse_backbone_config(config.get("backbone", {}))
    head_cfg = parse_head_config(config.get("heads", {}))
    return build_model(arch, backbone_cfg, head_cfg, seed=seed)


def _train_one(config: dict, arch: str, out_dir: Path, seed: int | None):
    dataset = resolve_dataset(config, seed)
    train_cfg = parse_train_config(config.get("train", {}), seed)
    train_cfg.out_dir = out_dir
    model = _build_model_from_config(config, arch, train_cfg.seed)
    record = train_architecture(model, dataset, train_cfg)
    return model, record, dataset, train_cfg


def cmd_train(args) -> int:
    config = _load_config(args.config)
    arch = config.get("arch")
    if arch not in ARCH_IDS:
        raise ValidationError(
            f"config 'arch' must be one of {', '.join(ARCH_IDS)}; got {arch!r}"
        )
    out = _prepare_out_dir(args.out, args.force)
    _, record, _, _ = _train_one(config, arch, out, args.seed)
    final_acc = record.curve("val_acc")[-1] if record.epochs_run else float("nan")
    print(f"trained {arch} for {record.epochs_run} epochs "
          f"(val_acc {final_acc:.3f}, {record.train_time_per_image_s * 1e3:.2f} ms/image) "
          f"-> {record.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    if not (ckpt_dir / "model.json").exists():
        raise ValidationError(f"no checkpoint at {ckpt_dir}")
    model = load_checkpoint(ckpt_dir)
    dataset = load_manifest(args.data)
    out = _prepare_out_dir(args.out, args.force)

    train_time = None
    run_json = ckpt_dir.parent / "run.json"
    if run_json.exists():
        train_time = json.loads(run_json.read_text()).get("train_time_per_image_s")

    report = evaluation.evaluate_tasks(
        model, dataset, measure_time=True, train_time_per_image_s=train_time
    )
    report.save(out / "metrics.json")
    for demo in dataset.test_demos:
        csv_path = out / f"trace_{demo.demo_id}.csv"
        evaluation.probability_trace(model, demo, out_csv=csv_path)
        plots.plot_trace_csv(csv_path, out / f"trace_{demo.demo_id}.png")
    macro = report.macro
    print(f"evaluated {model.arch_id} on {dataset.task_id}: "
          f"acc {macro['acc']:.3f} f1 {macro['f1']:.3f} auc {macro['auc']:.3f} "
          f"-> {out / 'metrics.json'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    arch = config.get("arch")
    if arch not in ARCH_IDS:
        raise ValidationError(f"config 'arch' must be a valid architecture, got {arch!r}")
    section = config.get("ablate", {})
    _check_keys(section, {"counts", "seeds"}, "ablate section")
    counts = section.get("counts", list(range(1, 11)))
    seeds = section.get("seeds", [0])
    if args.seed is not None:
        seeds = [args.seed]
    dataset = resolve_dataset(config, None)
    train_cfg = parse_train_config(config.get("train", {}), None)
    out = _prepare_out_dir(args.out, args.force)
    rows = evaluation.ablate_demo_count(
        arch, dataset, counts=counts, seeds=seeds, train_config=train_cfg,
        backbone_config=parse_backbone_config(config.get("backbone", {})),
        head_config=parse_head_config(config.get("heads", {})),
        out_csv=out / "ablation.csv",
    )
    plots.plot_ablation_csv(out / "ablation.csv", out / "ablation.png")
    print(f"ablation over counts {counts} x seeds {seeds}: {len(rows)} rows -> "
          f"{out / 'ablation.csv'}")
    return EXIT_OK


def _compare_worker(payload: tuple) -> tuple[str, str | None, int]:
    """Train + evaluate one architecture; returns (arch, error, exit_code)."""
    config, arch, out_dir, seed = payload
    try:
        import torch

        torch.set_num_threads(1)
        model, record, dataset, _ = _train_one(config, arch, Path(out_dir), seed)
        report = evaluation.evaluate_tasks(
            model, dataset, measure_time=True,
            train_time_per_image_s=record.train_time_per_image_s,
        )
        report.save(Path(out_dir) / "metrics.json")
        return arch, None, EXIT_OK
    except NumericalError as exc:
        return arch, str(exc), EXIT_NUMERICAL
    except _INPUT_ERRORS as exc:
        return arch, str(exc), EXIT_USAGE


_TABLE_COLUMNS = ("train_time", "test_time", "acc", "precision", "recall", "f1", "auc")


def cmd_compare(args) -> int:
    config = _load_config(args.config)
    section = _require(config, "compare")
    _check_keys(section, {"archs"}, "compare section")
    archs = section.get("archs")
    if not archs:
        raise ValidationError("compare section needs a non-empty 'archs' list")
    for arch in archs:
        if arch not in ARCH_IDS:
            raise ValidationError(f"unknown architecture {arch!r} in compare.archs")
    out = _prepare_out_dir(args.out, args.force)

    payloads = [(config, arch, str(out / arch), args.seed) for arch in archs]
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_compare_worker, payloads))
    else:
        results = [_compare_worker(p) for p in payloads]

    rows = []
    exit_code = EXIT_OK
    for arch, error, code in results:
        if error is not None:
            rows.append({"arch": arch, "status": "failed", "error": error})
            exit_code = max(exit_code, code)
            continue
        report = evaluation.MetricsReport.load(out / arch / "metrics.json")
        rows.append({
            "arch": arch,
            "status": "ok",
            "train_time": report.train_time_per_image_s,
            "test_time": report.macro["test_time_per_image_s"],
            "acc": report.macro["acc"],
            "precision": report.macro["precision"],
            "recall": report.macro["recall"],
            "f1": report.macro["f1"],
            "auc": report.macro["auc"],
        })

    with open(out / "comparison.csv", "w", newline="") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["arch", "status"] + list(_TABLE_COLUMNS))
        for row in rows:
            writer.writerow(
                [row["arch"], row["status"]]
                + [repr(row[c]) if row["status"] == "ok" else "" for c in _TABLE_COLUMNS]
            )

    lines = [
        "| Architecture | Train Time | Test Time | ACC | Precision | Recall | F1 | AUC |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for row in rows:
        if row["status"] == "ok":
            tt = row["train_time"]
            lines.append(
                "| {arch} | {tt} | {test_time:.4f} | {acc:.4f} | {precision:.4f} "
                "| {recall:.4f} | {f1:.4f} | {auc:.4f} |".format(
                    tt=f"{tt:.4f}" if tt is not None else "n/a", **row
                )
            )
        else:
            lines.append(f"| {row['arch']} | failed: {row['error']} | | | | | | |")
    ok_rows = [r for r in rows if r["status"] == "ok"]
    if len(ok_rows) >= 2:
        corr = evaluation.metric_correlations(ok_rows)
        lines.append("")
        lines.append(
            "Metric correlations (Pearson): "
            + ", ".join(f"{k}={v:.2f}" for k, v in corr.items())
        )
    (out / "comparison.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return exit_code


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tasksuccess",
        description="Train and evaluate task-success classifiers from demonstrations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, out=True):
        if config:
            p.add_argument("--config", required=True, help="path to a JSON run config")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        p.add_argument("--force", action="store_true",
                       help="overwrite a non-empty output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for compare")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train one architecture")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_eval.add_argument("--data", required=True, help="dataset directory or manifest")
    add_common(p_eval, config=False)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="demo-count ablation")
    add_common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_compare = sub.add_parser("compare", help="train+evaluate several architectures")
    add_common(p_compare)
    p_compare.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TaskSuccessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
