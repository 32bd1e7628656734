"""Classification metrics, per-task reports, probability traces, per-image
timing, and the demo-count ablation.

All metric computations are pure numpy. AUC is the rank-based (Mann-Whitney)
statistic with ties counted one half, which equals the trapezoidal ROC area.
Zero-denominator conventions are pessimistic: precision, recall, F1, and TNR
fall back to 0 when undefined.
"""

from __future__ import annotations

import csv
import json
import time
import warnings as _warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

import jsonschema

from .data import Demonstration, TaskDataset, build_frame_batch, preprocess_image
from .exceptions import ValidationError
from .models import ModelHandle, build_model, clone_model
from .training import (
    RunRecord,
    TrainConfig,
    classification_loss,
    train_architecture,
)

DEFAULT_THRESHOLD = 0.5

METRIC_KEYS = ("acc", "precision", "recall", "f1", "auc", "tpr", "tnr",
               "test_time_per_image_s")

METRICS_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "per_task", "macro", "train_time_per_image_s"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "per_task": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": list(METRIC_KEYS),
                "additionalProperties": False,
                "properties": {k: {"type": "number"} for k in METRIC_KEYS},
            },
        },
        "macro": {
            "type": "object",
            "required": list(METRIC_KEYS),
            "additionalProperties": False,
            "properties": {k: {"type": "number"} for k in METRIC_KEYS},
        },
        "train_time_per_image_s": {"type": ["number", "null"]},
    },
}


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class ProbabilityTrace:
    """Per-frame predicted probabilities and ground truth for one demonstration."""

    demo_id: str
    probs: np.ndarray
    labels: np.ndarray
    timing_pred: np.ndarray | None = None

    def __post_init__(self):
        if len(self.probs) != len(self.labels):
            raise ValidationError("trace probs/labels length mismatch")
        if self.timing_pred is not None and len(self.timing_pred) != len(self.probs):
            raise ValidationError("trace timing length mismatch")

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["frame", "prob", "label"]
            if self.timing_pred is not None:
                header.append("timing_pred")
            writer.writerow(header)
            for t in range(len(self.probs)):
                row = [t, repr(float(self.probs[t])), int(self.labels[t])]
                if self.timing_pred is not None:
                    row.append(repr(float(self.timing_pred[t])))
                writer.writerow(row)


@dataclass
class MetricsReport:
    """Per-task and macro-averaged metrics."""

    per_task: dict[str, dict[str, float]]
    macro: dict[str, float]
    train_time_per_image_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "per_task": self.per_task,
            "macro": self.macro,
            "train_time_per_image_s": self.train_time_per_image_s,
        }

    def save(self, path: str | Path):
        payload = self.to_dict()
        jsonschema.validate(payload, METRICS_SCHEMA)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        payload = json.loads(Path(path).read_text())
        jsonschema.validate(payload, METRICS_SCHEMA)
        return cls(
            per_task=payload["per_task"],
            macro=payload["macro"],
            train_time_per_image_s=payload["train_time_per_image_s"],
        )


# ---------------------------------------------------------------------------
# Core metrics
# ---------------------------------------------------------------------------


def confusion(probs, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Exact confusion counts; prob >= threshold predicts the positive class."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValidationError(
            f"probs shape {probs.shape} != labels shape {labels.shape}"
        )
    if probs.size == 0:
        raise ValidationError("confusion requires at least one sample")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def basic_metrics(c: ConfusionCounts) -> dict[str, float]:
    """ACC, precision, recall (=TPR), F1, TPR, TNR with pessimistic 0/0 rules."""
    if c.total == 0:
        raise ValidationError("cannot compute metrics over zero samples")
    acc = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else 0.0
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if (precision + recall) > 0
        else 0.0
    )
    tnr = c.tn / (c.tn + c.fp) if (c.tn + c.fp) > 0 else 0.0
    return {
        "acc": acc,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tpr": recall,
        "tnr": tnr,
    }


def auc(probs, labels) -> float:
    """Rank-based AUC: P(score_pos > score_neg) with ties counted one half."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValidationError("probs and labels must have equal length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError(
            "AUC is undefined without at least one positive and one negative label"
        )
    order = np.argsort(probs, kind="mergesort")
    ranks = np.empty(len(probs), dtype=np.float64)
    sorted_probs = probs[order]
    i = 0
    while i < len(probs):
        k = i
        while k + 1 < len(probs) and sorted_probs[k + 1] == sorted_probs[i]:
            k += 1
        ranks[order[i : k + 1]] = 0.5 * (i + k) + 1.0  # average 1-based rank
        i = k + 1
    rank_sum_pos = float(np.sum(ranks[labels == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pearson(x, y) -> float:
    """Pearson correlation coefficient of two equal-length sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("pearson requires two equal-length 1-d sequences")
    if len(x) < 2:
        raise ValidationError("pearson requires at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt(np.sum(dx * dx)))
    sy = float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0 or sy == 0.0:
        raise ValidationError("pearson is undefined for zero-variance input")
    return float(np.sum(dx * dy) / (sx * sy))


def metric_correlations(rows: list[dict[str, float]]) -> dict[str, float]:
    """Pairwise Pearson correlations among acc/f1/auc columns of report rows."""
    out = {}
    for a, b in (("acc", "f1"), ("acc", "auc"), ("f1", "auc")):
        try:
            out[f"{a}_vs_{b}"] = pearson([r[a] for r in rows], [r[b] for r in rows])
        except ValidationError:
            out[f"{a}_vs_{b}"] = float("nan")
    return out


# ---------------------------------------------------------------------------
# Model-level evaluation
# ---------------------------------------------------------------------------


def _demo_images(demo: Demonstration) -> np.ndarray:
    return np.stack([preprocess_image(f.pixels) for f in demo.frames]).astype(np.float32)


def predict_demo(model: ModelHandle, demo: Demonstration) -> np.ndarray:
    """One success probability per frame, using the model's natural path."""
    return model.predict_demo_probs(_demo_images(demo))


def probability_trace(
    model: ModelHandle, demo: Demonstration, out_csv: str | Path | None = None
) -> ProbabilityTrace:
    """Per-frame probability trace for one demo; optionally emitted as CSV."""
    images = _demo_images(demo)
    probs = model.predict_demo_probs(images)
    timing_pred = None
    if "timing" in model.head_names and not model.is_sequential:
        timing_pred = model.predict_timing(images)
    trace = ProbabilityTrace(
        demo_id=demo.demo_id, probs=probs, labels=np.asarray(demo.labels),
        timing_pred=timing_pred,
    )
    if out_csv is not None:
        trace.to_csv(out_csv)
    return trace


def time_per_image(
    model: ModelHandle,
    frames: np.ndarray,
    mode: str,
    repetitions: int = 3,
) -> float:
    """Wall-clock seconds per image, averaged over >= 3 repetitions after warm-up.

    ``test`` times the inference path; ``train`` times a full optimization step
    (forward, backward, update) on a throwaway clone so the model is untouched.
    """
    if mode not in ("train", "test"):
        raise ValidationError(f"mode must be 'train' or 'test', got {mode!r}")
    frames = np.asarray(frames, dtype=np.float32)
    n = len(frames)
    if n == 0:
        raise ValidationError("need at least one frame to time")
    if n < 100:
        _warnings.warn(
            f"timing over {n} frames (< 100) may be unstable", stacklevel=2
        )
    repetitions = max(repetitions, 3)

    if mode == "test":
        def run():
            model.predict_demo_probs(frames)
    else:
        subject = clone_model(model)
        opt = torch.optim.Adam(subject.trainable_parameters(), lr=1e-3)
        dummy_frame_labels = torch.zeros(n)
        if subject.is_sequential:
            from .seq2seq import WINDOW_LENGTH, build_sequence_samples

            feats = subject.frame_features(frames)
            samples = build_sequence_samples(feats, np.zeros(n, dtype=np.int64))
            fw = torch.from_numpy(np.stack([s.feature_window for s in samples])).float()
            lw = torch.from_numpy(np.stack([s.label_window for s in samples])).long()
            pm = torch.from_numpy(np.stack([s.pad_mask for s in samples])).bool()

            def run():
                probs = subject.decode_windows(fw, pm, lw, "teacher_forcing")
                loss = classification_loss(probs.reshape(-1), lw.reshape(-1).float())
                opt.zero_grad()
                loss.backward()
                opt.step()
        else:
            from .backbones import images_to_tensor

            images = images_to_tensor(frames)

            def run():
                subject.train_mode()
                probs = subject.heads["classification"](subject.trainable_features(images))
                loss = classification_loss(probs, dummy_frame_labels)
                opt.zero_grad()
                loss.backward()
                opt.step()

    run()  # warm-up, excluded
    elapsed = 0.0
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run()
        elapsed += time.perf_counter() - t0
    return elapsed / (repetitions * n)


def evaluate_tasks(
    model: ModelHandle,
    datasets: list[TaskDataset] | TaskDataset,
    threshold: float = DEFAULT_THRESHOLD,
    measure_time: bool = False,
    train_time_per_image_s: float | None = None,
) -> MetricsReport:
    """Per-task metrics on each dataset's target test demos, plus the macro row."""
    if isinstance(datasets, TaskDataset):
        datasets = [datasets]
    if not datasets:
        raise ValidationError("no datasets to evaluate")
    per_task: dict[str, dict[str, float]] = {}
    for ds in datasets:
        if not ds.test_demos:
            raise ValidationError(f"dataset {ds.task_id!r} has no test demonstrations")
        probs, labels = [], []
        all_images = []
        for demo in ds.test_demos:
            p = predict_demo(model, demo)
            probs.append(p)
            labels.append(np.asarray(demo.labels))
            all_images.append(_demo_images(demo))
        probs = np.concatenate(probs)
        labels = np.concatenate(labels)
        metrics = basic_metrics(confusion(probs, labels, threshold))
        metrics["auc"] = auc(probs, labels)
        if measure_time:
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore")
                metrics["test_time_per_image_s"] = time_per_image(
                    model, np.concatenate(all_images), "test"
                )
        else:
            metrics["test_time_per_image_s"] = 0.0
        per_task[ds.task_id] = metrics
    keys = list(METRIC_KEYS)
    macro = {k: float(np.mean([m[k] for m in per_task.values()])) for k in keys}
    return MetricsReport(
        per_task=per_task, macro=macro, train_time_per_image_s=train_time_per_image_s
    )


# ---------------------------------------------------------------------------
# Demo-count ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    arch: str
    demos: int
    seed: int
    acc: float
    f1: float
    auc: float


def save_ablation_csv(rows: list[AblationRow], path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arch", "demos", "seed", "acc", "f1", "auc"])
        for r in rows:
            writer.writerow([r.arch, r.demos, r.seed, repr(r.acc), repr(r.f1), repr(r.auc)])


def ablate_demo_count(
    arch_id: str,
    dataset: TaskDataset,
    counts: list[int] | None = None,
    seeds: list[int] | None = None,
    train_config: TrainConfig | None = None,
    backbone_config=None,
    head_config=None,
    out_csv: str | Path | None = None,
) -> list[AblationRow]:
    """Accuracy/F1/AUC on the fixed test set as the training demo count varies.

    For each seed the training demos are shuffled once; for each count k the
    first k demos train a fresh model which is then evaluated on the full test
    split. One row per (count, seed).
    """
    counts = counts or list(range(1, 11))
    seeds = seeds or [0]
    train_config = train_config or TrainConfig()
    if max(counts) > len(dataset.train_demos):
        raise ValidationError(
            f"ablation needs {max(counts)} training demos, dataset has "
            f"{len(dataset.train_demos)}"
        )
    if min(counts) < 1:
        raise ValidationError("demo counts must be >= 1")
    rows: list[AblationRow] = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 421])
        order = rng.permutation(len(dataset.train_demos))
        for k in counts:
            sub = TaskDataset(
                task_id=dataset.task_id,
                train_demos=[dataset.train_demos[i] for i in order[:k]],
                test_demos=dataset.test_demos,
                metadata=dict(dataset.metadata),
            )
            model = build_model(arch_id, backbone_config, head_config, seed=seed)
            cfg = replace(train_config, seed=seed, out_dir=None)
            train_architecture(model, sub, cfg)
            report = evaluate_tasks(model, sub)
            m = report.per_task[dataset.task_id]
            rows.append(
                AblationRow(arch=arch_id, demos=k, seed=seed,
                            acc=m["acc"], f1=m["f1"], auc=m["auc"])
            )
    if out_csv is not None:
        save_ablation_csv(rows, out_csv)
    return rows
