"""Demonstration data types, preprocessing, splits, windowing, and disk ingestion.

A demonstration is an ordered sequence of camera frames for one task execution,
labelled 0 (non-success) before the success onset and 1 from it onward. Datasets
live on disk as a ``dataset.json`` manifest plus per-demo PNG frame directories;
:func:`load_manifest` validates and ingests them, :func:`export_dataset` writes
them back out in the same format.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import IngestionError, ShapeError, ValidationError

#: Model input side length; raw frames are resized to INPUT_SIZE x INPUT_SIZE.
INPUT_SIZE = 160

#: Raw camera frame size (height, width) in the Kitchen collection layout.
KITCHEN_RAW_HW = (240, 320)

SOURCE = "source"
TARGET = "target"

_MANIFEST_NAME = "dataset.json"


@dataclass
class Frame:
    """One camera frame: ``pixels`` is an HxWx3 array, ``step_index`` its time step.

    Raw frames hold uint8 pixels; preprocessed frames hold float32 in [0, 1].
    ``meta`` carries optional generator-attached data (e.g. scene geometry).
    """

    pixels: np.ndarray
    step_index: int
    meta: dict | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(
                f"frame pixels must be HxWx3, got shape {tuple(self.pixels.shape)}"
            )
        if self.step_index < 0:
            raise ValidationError(f"step_index must be >= 0, got {self.step_index}")


@dataclass
class Demonstration:
    """Ordered labelled frame sequence for one task execution.

    ``success_onset`` is the index of the first Success frame; ``success_onset ==
    length_j`` means no success was observed. Labels are 0 before the onset and 1
    from it onward, hence monotone non-decreasing.
    """

    frames: list[Frame]
    labels: np.ndarray
    success_onset: int
    task_id: str
    demo_id: str = ""
    domain_tag: str = SOURCE

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        j = len(self.frames)
        if j < 2:
            raise ValidationError(
                f"demonstration {self.demo_id or self.task_id!r} has {j} frames; need >= 2"
            )
        if len(self.labels) != j:
            raise ValidationError(
                f"demonstration {self.demo_id!r}: {len(self.labels)} labels for {j} frames"
            )
        if not 0 <= self.success_onset <= j:
            raise ValidationError(
                f"demonstration {self.demo_id!r}: success_onset {self.success_onset} "
                f"out of range [0, {j}]"
            )
        expected = _labels_from_onset(j, self.success_onset)
        if not np.array_equal(self.labels, expected):
            raise ValidationError(
                f"demonstration {self.demo_id!r}: labels do not match success_onset "
                f"{self.success_onset}"
            )
        if self.domain_tag not in (SOURCE, TARGET):
            raise ValidationError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        for t, frame in enumerate(self.frames):
            if frame.step_index != t:
                raise ValidationError(
                    f"demonstration {self.demo_id!r}: step_index gap at position {t}"
                )

    @property
    def length_j(self) -> int:
        return len(self.frames)


@dataclass
class TaskDataset:
    """Named task with train (source-domain) and test (target-domain) demos."""

    task_id: str
    train_demos: list[Demonstration]
    test_demos: list[Demonstration]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for demo in self.train_demos + self.test_demos:
            if demo.task_id != self.task_id:
                raise ValidationError(
                    f"demo {demo.demo_id!r} has task_id {demo.task_id!r}, "
                    f"dataset is {self.task_id!r}"
                )
        train_ids = {d.demo_id for d in self.train_demos}
        test_ids = {d.demo_id for d in self.test_demos}
        overlap = train_ids & test_ids
        if overlap:
            raise ValidationError(f"train and test demos overlap: {sorted(overlap)}")


@dataclass
class FrameBatch:
    """Batch of preprocessed frames with labels, timing targets, and domain tags."""

    images: np.ndarray        # (N, INPUT_SIZE, INPUT_SIZE, 3) float32 in [0, 1]
    labels: np.ndarray        # (N,) in {0, 1}
    timing_targets: np.ndarray  # (N,) in [0, 1]
    domain_tags: np.ndarray   # (N,) in {0, 1}: 0=source, 1=target

    def __post_init__(self):
        n = len(self.images)
        for name in ("labels", "timing_targets", "domain_tags"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"FrameBatch field {name} has length != {n}")
        tt = np.asarray(self.timing_targets)
        if tt.size and (tt.min() < 0.0 or tt.max() > 1.0):
            raise ValidationError("timing_targets must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)


def _labels_from_onset(j: int, success_onset: int) -> np.ndarray:
    labels = np.zeros(j, dtype=np.int64)
    labels[success_onset:] = 1
    return labels


def label_frames(
    demo_frames: Sequence[Frame],
    success_onset: int,
    task_id: str = "",
    demo_id: str = "",
    domain_tag: str = SOURCE,
) -> Demonstration:
    """Build a Demonstration by labelling frames 0 before the onset, 1 from it on."""
    j = len(demo_frames)
    if j < 2:
        raise ValidationError(f"demonstration {demo_id!r} has {j} frames; need >= 2")
    if not 0 <= success_onset <= j:
        raise ValidationError(
            f"demonstration {demo_id!r}: success_onset {success_onset} out of range [0, {j}]"
        )
    return Demonstration(
        frames=list(demo_frames),
        labels=_labels_from_onset(j, success_onset),
        success_onset=success_onset,
        task_id=task_id,
        demo_id=demo_id,
        domain_tag=domain_tag,
    )


def timing_targets(demo: Demonstration) -> np.ndarray:
    """Completion proportion t/(j-1) for every time step t of the demonstration."""
    j = demo.length_j
    if j < 2:
        raise ValidationError("timing targets undefined for demonstrations with j < 2")
    return np.arange(j, dtype=np.float64) / (j - 1)


def preprocess_image(pixels: np.ndarray) -> np.ndarray:
    """Resize to INPUT_SIZE x INPUT_SIZE (bilinear) and scale 8-bit values to [0, 1].

    Float inputs are assumed already scaled and are only resized, which makes the
    function idempotent bit-for-bit. Aspect ratio is not preserved.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image with 3 channels, got {tuple(pixels.shape)}")
    if pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise ShapeError(f"image dimensions must be >= 1x1, got {tuple(pixels.shape)}")
    if np.issubdtype(pixels.dtype, np.integer):
        out = pixels.astype(np.float32) / 255.0
    else:
        out = pixels.astype(np.float32)
    if out.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
        t = torch.from_numpy(np.ascontiguousarray(out)).permute(2, 0, 1).unsqueeze(0)
        t = F.interpolate(t, size=(INPUT_SIZE, INPUT_SIZE), mode="bilinear", align_corners=False)
        out = t.squeeze(0).permute(1, 2, 0).contiguous().numpy()
    return out


def preprocess_frame(raw: Frame) -> Frame:
    """Preprocess one frame's pixels; step index and metadata are preserved."""
    return Frame(pixels=preprocess_image(raw.pixels), step_index=raw.step_index, meta=raw.meta)


def split_train_val(items: Sequence, ratio: float, seed: int) -> tuple[list, list]:
    """Random, seed-deterministic partition with |train| = round(ratio * N).

    The two parts are disjoint and exhaustive. Rounding is half-up.
    """
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(items)
    if n < 2:
        raise ValidationError(f"need at least 2 items to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(np.floor(ratio * n + 0.5))
    train = [items[i] for i in perm[:n_train]]
    val = [items[i] for i in perm[n_train:]]
    return train, val


def window_index_map(j: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding-window index rows over a length-j sequence, one window per position.

    Window k ends at position k and covers [k-window+1, k]; positions before 0 are
    clamped to 0 (repeat-first-frame padding) and flagged in the pad mask.

    Returns ``(indices, pad_mask)``, both of shape (j, window); ``pad_mask`` is 1
    at left-padded positions.
    """
    if window < 1:
        raise ValidationError(f"window length must be >= 1, got {window}")
    if j < 1:
        raise ValidationError(f"sequence length must be >= 1, got {j}")
    ends = np.arange(j)[:, None]
    offsets = np.arange(-(window - 1), 1)[None, :]
    raw = ends + offsets
    pad_mask = (raw < 0).astype(np.int64)
    indices = np.clip(raw, 0, None)
    return indices, pad_mask


def make_windows(demo: Demonstration, window: int) -> list[tuple[list[Frame], np.ndarray]]:
    """Sliding frame/label windows over a demonstration, one per frame.

    Demonstrations shorter than ``window`` are left-padded by repeating the first
    frame; the label window is padded with the first label accordingly.
    """
    indices, _ = window_index_map(demo.length_j, window)
    out = []
    for row in indices:
        frames = [demo.frames[i] for i in row]
        labels = demo.labels[row]
        out.append((frames, labels))
    return out


def build_frame_batch(demos: Iterable[Demonstration]) -> FrameBatch:
    """Preprocess all frames of the given demos into one flat FrameBatch."""
    images, labels, timings, tags = [], [], [], []
    for demo in demos:
        yt = timing_targets(demo)
        tag = 0 if demo.domain_tag == SOURCE else 1
        for t, frame in enumerate(demo.frames):
            images.append(preprocess_image(frame.pixels))
            labels.append(int(demo.labels[t]))
            timings.append(float(yt[t]))
            tags.append(tag)
    if not images:
        raise ValidationError("cannot build a FrameBatch from zero demonstrations")
    return FrameBatch(
        images=np.stack(images).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        timing_targets=np.asarray(timings, dtype=np.float64),
        domain_tags=np.asarray(tags, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Manifest ingestion and export
# ---------------------------------------------------------------------------

_ENTRY_KEYS = {"demo_id", "frame_dir", "frame_pattern", "num_frames", "success_onset", "domain"}
_PATTERN_RE = re.compile(r"%0\d+d")


def _manifest_path(path: Path) -> Path:
    path = Path(path)
    return path / _MANIFEST_NAME if path.is_dir() else path


def _load_entry(root: Path, split: str, entry: dict) -> Demonstration:
    missing = _ENTRY_KEYS - set(entry)
    if missing:
        raise IngestionError(
            f"{split} entry {entry.get('demo_id', '?')!r} is missing keys {sorted(missing)}"
        )
    demo_id = entry["demo_id"]
    pattern = entry["frame_pattern"]
    if not _PATTERN_RE.search(pattern):
        raise IngestionError(f"demo {demo_id!r}: frame_pattern {pattern!r} has no %0Nd field")
    num_frames = int(entry["num_frames"])
    onset = int(entry["success_onset"])
    domain = entry["domain"]
    expected_domain = SOURCE if split == "train" else TARGET
    if domain != expected_domain:
        raise IngestionError(
            f"demo {demo_id!r}: {split} split demos must have domain "
            f"{expected_domain!r}, got {domain!r}"
        )
    frame_dir = root / entry["frame_dir"]
    frames = []
    for t in range(num_frames):
        frame_path = frame_dir / (pattern % t)
        if not frame_path.exists():
            raise IngestionError(f"demo {demo_id!r}: missing frame file {frame_path}")
        with Image.open(frame_path) as img:
            if img.mode != "RGB":
                raise IngestionError(
                    f"demo {demo_id!r}: frame {frame_path} has mode {img.mode}, expected RGB"
                )
            pixels = np.asarray(img, dtype=np.uint8)
        frames.append(Frame(pixels=pixels, step_index=t))
    try:
        return label_frames(frames, onset, task_id="", demo_id=demo_id, domain_tag=domain)
    except ValidationError as exc:
        raise IngestionError(f"demo {demo_id!r} under {frame_dir}: {exc}") from exc


def load_manifest(path: str | Path) -> TaskDataset:
    """Load and validate a task dataset from its ``dataset.json`` manifest.

    ``path`` may be the manifest file or the directory containing it. Frame
    counts, onsets, and per-split domains are checked against the declarations;
    any mismatch raises :class:`IngestionError` naming the offending file.
    """
    manifest_path = _manifest_path(Path(path))
    if not manifest_path.exists():
        raise IngestionError(f"no manifest found at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"malformed manifest {manifest_path}: {exc}") from exc
    for key in ("task_id", "sampling_rate_hz", "splits"):
        if key not in manifest:
            raise IngestionError(f"manifest {manifest_path} is missing key {key!r}")
    splits = manifest["splits"]
    if not isinstance(splits, dict) or set(splits) != {"train", "test"}:
        raise IngestionError(f"manifest {manifest_path}: splits must have keys train/test")
    if not splits["train"] and not splits["test"]:
        raise IngestionError(f"manifest {manifest_path} declares no demonstrations")

    root = manifest_path.parent
    task_id = manifest["task_id"]
    demos: dict[str, list[Demonstration]] = {"train": [], "test": []}
    for split in ("train", "test"):
        for entry in splits[split]:
            demo = _load_entry(root, split, entry)
            demo.task_id = task_id
            demos[split].append(demo)

    metadata = {"sampling_rate_hz": manifest["sampling_rate_hz"]}
    metadata.update(manifest.get("metadata", {}))
    return TaskDataset(
        task_id=task_id,
        train_demos=demos["train"],
        test_demos=demos["test"],
        metadata=metadata,
    )


def export_dataset(
    dataset: TaskDataset,
    out_dir: str | Path,
    sampling_rate_hz: float | None = None,
    force: bool = False,
) -> Path:
    """Write a TaskDataset to disk in the manifest format; returns the manifest path.

    Frames must hold uint8 pixels (raw, not preprocessed). Refuses to write into
    an existing non-empty directory unless ``force`` is set.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ValidationError(f"output directory {out_dir} is not empty (use force)")
    out_dir.mkdir(parents=True, exist_ok=True)

    splits: dict[str, list[dict]] = {"train": [], "test": []}
    for split, demos in (("train", dataset.train_demos), ("test", dataset.test_demos)):
        for demo in demos:
            frame_dir = Path(split) / demo.demo_id
            abs_dir = out_dir / frame_dir
            abs_dir.mkdir(parents=True, exist_ok=True)
            for frame in demo.frames:
                if frame.pixels.dtype != np.uint8:
                    raise ValidationError(
                        f"demo {demo.demo_id!r}: export requires uint8 frames, "
                        f"got {frame.pixels.dtype}"
                    )
                Image.fromarray(frame.pixels, mode="RGB").save(
                    abs_dir / (f"frame_%05d.png" % frame.step_index)
                )
            splits[split].append(
                {
                    "demo_id": demo.demo_id,
                    "frame_dir": str(frame_dir),
                    "frame_pattern": "frame_%05d.png",
                    "num_frames": demo.length_j,
                    "success_onset": demo.success_onset,
                    "domain": demo.domain_tag,
                }
            )

    if sampling_rate_hz is None:
        sampling_rate_hz = float(dataset.metadata.get("sampling_rate_hz", 10.0))
    manifest = {
        "task_id": dataset.task_id,
        "sampling_rate_hz": sampling_rate_hz,
        "splits": splits,
    }
    extra = {k: v for k, v in dataset.metadata.items() if k != "sampling_rate_hz"}
    if extra:
        manifest["metadata"] = extra
    manifest_path = out_dir / _MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def convert_kitchen_layout(root: str | Path, task_id: str | None = None) -> Path:
    """Emit a manifest for a Kitchen-style flat layout.

    Expected layout: ``root/annotations.csv`` with columns
    ``demo_id,split,success_onset`` and flat frame files
    ``root/<split>/<demo_id>_%05d.png``.
    """
    root = Path(root)
    ann_path = root / "annotations.csv"
    if not ann_path.exists():
        raise IngestionError(f"Kitchen layout requires {ann_path}")
    splits: dict[str, list[dict]] = {"train": [], "test": []}
    with open(ann_path, newline="") as fh:
        for row in csv.DictReader(fh):
            demo_id, split = row["demo_id"], row["split"]
            if split not in splits:
                raise IngestionError(f"annotations.csv: unknown split {split!r}")
            frame_files = sorted((root / split).glob(f"{demo_id}_*.png"))
            if not frame_files:
                raise IngestionError(f"no frames for demo {demo_id!r} under {root / split}")
            splits[split].append(
                {
                    "demo_id": demo_id,
                    "frame_dir": split,
                    "frame_pattern": f"{demo_id}_%05d.png",
                    "num_frames": len(frame_files),
                    "success_onset": int(row["success_onset"]),
                    "domain": SOURCE if split == "train" else TARGET,
                }
            )
    manifest = {
        "task_id": task_id or root.name,
        "sampling_rate_hz": 10.0,
        "splits": splits,
    }
    manifest_path = root / _MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def convert_mime_layout(root: str | Path, task_id: str | None = None) -> Path:
    """Emit a manifest for a MIME-style layout of per-demo video-frame folders.

    Expected layout: ``root/<split>/<demo_id>/frame_%05d.png`` plus a per-demo
    ``meta.json`` holding ``{"success_onset": int}``.
    """
    root = Path(root)
    splits: dict[str, list[dict]] = {"train": [], "test": []}
    for split in ("train", "test"):
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        for demo_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            meta_path = demo_dir / "meta.json"
            if not meta_path.exists():
                raise IngestionError(f"MIME demo {demo_dir} is missing meta.json")
            meta = json.loads(meta_path.read_text())
            if "success_onset" not in meta:
                raise IngestionError(f"{meta_path} does not declare success_onset")
            frame_files = sorted(demo_dir.glob("frame_*.png"))
            if not frame_files:
                raise IngestionError(f"no frames under {demo_dir}")
            splits[split].append(
                {
                    "demo_id": demo_dir.name,
                    "frame_dir": str(Path(split) / demo_dir.name),
                    "frame_pattern": "frame_%05d.png",
                    "num_frames": len(frame_files),
                    "success_onset": int(meta["success_onset"]),
                    "domain": SOURCE if split == "train" else TARGET,
                }
            )
    if not splits["train"] and not splits["test"]:
        raise IngestionError(f"no demonstrations found under {root}")
    manifest = {
        "task_id": task_id or root.name,
        "sampling_rate_hz": 10.0,
        "splits": splits,
    }
    manifest_path = root / _MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
