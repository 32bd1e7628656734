"""Static line-plot emission from the CSV artifacts (traces, ablation curves)."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402


def plot_trace_csv(csv_path: str | Path, out_png: str | Path) -> Path:
    """Plot predicted probability vs frame index for one trace CSV."""
    frames, probs, labels, timing = [], [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        has_timing = "timing_pred" in (reader.fieldnames or [])
        for row in reader:
            frames.append(int(row["frame"]))
            probs.append(float(row["prob"]))
            labels.append(int(row["label"]))
            if has_timing:
                timing.append(float(row["timing_pred"]))
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.step(frames, labels, where="post", color="0.6", label="ground truth")
    ax.plot(frames, probs, color="tab:red", label="p(success)")
    if timing:
        ax.plot(frames, timing, color="tab:blue", ls="--", label="timing pred")
    ax.set_xlabel("frame")
    ax.set_ylabel("probability")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def plot_ablation_csv(csv_path: str | Path, out_png: str | Path) -> Path:
    """Plot median accuracy vs training demo count, one line per architecture."""
    by_arch: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_arch[row["arch"]][int(row["demos"])].append(float(row["acc"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for arch, per_count in sorted(by_arch.items()):
        counts = sorted(per_count)
        medians = [float(np.median(per_count[k])) for k in counts]
        ax.plot(counts, medians, marker="o", label=arch)
    ax.set_xlabel("training demonstrations")
    ax.set_ylabel("median accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
