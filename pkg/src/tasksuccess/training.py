"""Losses, optimization, and the three training regimes.

All regimes share one deterministic epoch loop: batch order comes from named
RNG streams derived from the config seed, parameters start from per-component
seeded init, and zero-weighted loss terms are skipped entirely. Together these
give the reduction identities (multitask with zero timing weight, DANN with
zero reversal coefficient, ADDA with zero adversarial epochs) bitwise, in
single-threaded mode.

Target-domain data is accepted only as unlabeled image arrays, so adversarial
adaptation can never read target labels.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backbones import FcnBackbone, derive_seed, images_to_tensor
from .data import TaskDataset, build_frame_batch, preprocess_image
from .exceptions import CapabilityError, NumericalError, ValidationError
from .models import ModelHandle, save_checkpoint
from .seq2seq import WINDOW_LENGTH, build_sequence_samples

GRL_SCHEDULES = ("dann_warmup",)


@dataclass
class LossWeights:
    w_cls: float = 1.0
    w_time: float = 1.0
    w_dom: float = 1.0

    def validate(self):
        if min(self.w_cls, self.w_time, self.w_dom) < 0:
            raise ValidationError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    batch_size: int = 16
    epochs: int = 100
    optimizer: str = "adam"
    learning_rate: float = 0.001
    split_ratio: float = 0.8
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    grl_lambda: float | str = 1.0          # constant, or "dann_warmup" schedule
    early_stopping: int | None = None      # patience in epochs; None = off
    adversarial_epochs: int | None = None  # ADDA stage 2; None = same as epochs
    adversarial_lr: float | None = None    # ADDA stage 2 discriminator; None = lr / 2
    split_by: str = "frame"                # "frame" or "demo" granularity
    num_threads: int | None = 1            # None leaves the torch default
    out_dir: str | Path | None = None      # persist run.json/curves/checkpoint

    def validate(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValidationError("split_ratio must be in (0, 1)")
        self.loss_weights.validate()
        if isinstance(self.grl_lambda, str) and self.grl_lambda not in GRL_SCHEDULES:
            raise ValidationError(
                f"unknown grl_lambda schedule {self.grl_lambda!r}; known: {GRL_SCHEDULES}"
            )
        if isinstance(self.grl_lambda, (int, float)) and self.grl_lambda < 0:
            raise ValidationError("grl_lambda must be >= 0")
        if self.split_by not in ("frame", "demo"):
            raise ValidationError("split_by must be 'frame' or 'demo'")
        if self.early_stopping is not None and self.early_stopping < 1:
            raise ValidationError("early_stopping patience must be >= 1")
        if self.adversarial_epochs is not None and self.adversarial_epochs < 0:
            raise ValidationError("adversarial_epochs must be >= 0")
        if self.adversarial_lr is not None and self.adversarial_lr <= 0:
            raise ValidationError("adversarial_lr must be > 0")


@dataclass
class RunRecord:
    """Persisted outcome of one training run (or one ADDA stage)."""

    arch_id: str
    regime: str
    seed: int
    config: dict
    epochs_run: int = 0
    curves: dict[str, list[float]] = field(default_factory=dict)
    best_epoch: int | None = None
    train_time_per_image_s: float = 0.0
    wall_time_s: float = 0.0
    checkpoint_path: str | None = None
    warnings: list[str] = field(default_factory=list)

    def curve(self, key: str) -> list[float]:
        return self.curves.get(key, [])


def _config_snapshot(config: TrainConfig) -> dict:
    snap = asdict(config)
    if snap["out_dir"] is not None:
        snap["out_dir"] = str(snap["out_dir"])
    return snap


def save_run_record(record: RunRecord, out_dir: str | Path) -> Path:
    """Write run.json plus a curves.csv with one row per epoch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = asdict(record)
    payload["curves_csv"] = "curves.csv"
    del payload["curves"]
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    keys = sorted(record.curves)
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + keys)
        for epoch in range(record.epochs_run):
            writer.writerow([epoch] + [repr(record.curves[k][epoch]) for k in keys])
    return out_dir / "run.json"


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _as_float_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float() if not x.dtype.is_floating_point else x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def classification_loss(probs, labels) -> torch.Tensor:
    """Mean binary cross-entropy between predicted probabilities and 0/1 labels."""
    p, y = _as_float_tensor(probs), _as_float_tensor(labels)
    if p.shape != y.shape:
        raise ValidationError(f"probs shape {tuple(p.shape)} != labels shape {tuple(y.shape)}")
    if p.numel() == 0:
        raise ValidationError("classification_loss requires at least one sample")
    return torch.nn.functional.binary_cross_entropy(p, y.to(p.dtype))


def timing_loss(pred, target) -> torch.Tensor:
    """Mean squared error between predicted and true completion proportions."""
    p, t = _as_float_tensor(pred), _as_float_tensor(target)
    if p.shape != t.shape:
        raise ValidationError(f"pred shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    if p.numel() == 0:
        raise ValidationError("timing_loss requires at least one sample")
    return torch.nn.functional.mse_loss(p, t.to(p.dtype))


def grl_schedule(progress: float) -> float:
    """Warm-up coefficient 2/(1+exp(-10 p)) - 1 over training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


# ---------------------------------------------------------------------------
# Shared machinery
# ---------------------------------------------------------------------------


def _stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


def _apply_thread_config(config: TrainConfig):
    if config.num_threads is not None:
        torch.set_num_threads(config.num_threads)


def _split_indices(n: int, demo_sizes: list[int], config: TrainConfig):
    """Train/val index split at frame or demo granularity."""
    rng = _stream_rng(config.seed, "split")
    if config.split_by == "frame":
        perm = rng.permutation(n)
        n_train = int(np.floor(config.split_ratio * n + 0.5))
        return perm[:n_train], perm[n_train:]
    starts = np.cumsum([0] + demo_sizes[:-1])
    perm = rng.permutation(len(demo_sizes))
    n_train = int(np.floor(config.split_ratio * len(demo_sizes) + 0.5))
    train_idx = np.concatenate(
        [np.arange(starts[d], starts[d] + demo_sizes[d]) for d in perm[:n_train]]
    ) if n_train else np.array([], dtype=int)
    val_idx = np.concatenate(
        [np.arange(starts[d], starts[d] + demo_sizes[d]) for d in perm[n_train:]]
    ) if n_train < len(demo_sizes) else np.array([], dtype=int)
    return train_idx, val_idx


def _batch_chunks(perm: np.ndarray, batch_size: int):
    for lo in range(0, len(perm), batch_size):
        yield perm[lo : lo + batch_size]


class _BestTracker:
    """Best-validation selection: higher accuracy wins, ties broken by lower loss."""

    def __init__(self):
        self.acc = -1.0
        self.loss = float("inf")
        self.epoch: int | None = None
        self.state: dict | None = None

    def update(self, epoch: int, acc: float, loss: float, model: ModelHandle) -> bool:
        if acc > self.acc or (acc == self.acc and loss < self.loss):
            self.acc, self.loss, self.epoch = acc, loss, epoch
            self.state = {
                k: v.detach().clone()
                for mod_name, mod in model._modules().items()
                for k, v in ((f"{mod_name}.{n}", t) for n, t in mod.state_dict().items())
            }
            return True
        return False

    def restore(self, model: ModelHandle):
        if self.state is None:
            return
        for mod_name, mod in model._modules().items():
            sub = {
                k[len(mod_name) + 1 :]: v
                for k, v in self.state.items()
                if k.startswith(mod_name + ".")
            }
            mod.load_state_dict(sub)


def _check_finite(loss: torch.Tensor, epoch: int, batch_idx: int):
    if not bool(torch.isfinite(loss)):
        raise NumericalError(
            f"non-finite loss at epoch {epoch}, batch {batch_idx}",
            epoch=epoch,
            batch=batch_idx,
        )


def unlabeled_images(demos) -> np.ndarray:
    """Preprocessed images of the given demos with all labels stripped.

    This is the only sanctioned way to feed target-domain data to the
    adversarial regimes.
    """
    images = [preprocess_image(f.pixels) for demo in demos for f in demo.frames]
    if not images:
        raise ValidationError("no frames in the given demonstrations")
    return np.stack(images).astype(np.float32)


def _finish_record(
    record: RunRecord,
    model: ModelHandle,
    config: TrainConfig,
    step_time: float,
    images_seen: int,
    started: float,
    subdir: str | None = None,
):
    record.train_time_per_image_s = step_time / max(images_seen, 1)
    record.wall_time_s = time.perf_counter() - started
    if config.out_dir is not None:
        out = Path(config.out_dir) if subdir is None else Path(config.out_dir) / subdir
        ckpt = save_checkpoint(model, out / "checkpoint")
        record.checkpoint_path = str(ckpt)
        save_run_record(record, out)


# ---------------------------------------------------------------------------
# Frame-level training (NASNET, FCN, T_FCN, DANN source step, ADDA stage 1)
# ---------------------------------------------------------------------------


def _prepare_frame_tensors(dataset: TaskDataset):
    if not dataset.train_demos:
        raise ValidationError(f"dataset {dataset.task_id!r} has no training demonstrations")
    batch = build_frame_batch(dataset.train_demos)
    images = images_to_tensor(batch.images)
    labels = torch.from_numpy(batch.labels).float()
    timings = torch.from_numpy(batch.timing_targets).float()
    demo_sizes = [d.length_j for d in dataset.train_demos]
    return images, labels, timings, demo_sizes


def _frame_loop(
    model: ModelHandle,
    dataset: TaskDataset,
    config: TrainConfig,
    regime: str,
    use_timing: bool,
    target_images: np.ndarray | None = None,
) -> RunRecord:
    config.validate()
    _apply_thread_config(config)
    started = time.perf_counter()
    images, labels, timings, demo_sizes = _prepare_frame_tensors(dataset)
    train_idx, val_idx = _split_indices(len(images), demo_sizes, config)

    w = config.loss_weights
    use_timing = use_timing and w.w_time > 0.0

    schedule = isinstance(config.grl_lambda, str)
    lam_const = 0.0 if schedule else float(config.grl_lambda)
    use_domain = regime == "dann" and (schedule or lam_const > 0.0) and w.w_dom > 0.0
    if use_domain and (target_images is None or len(target_images) == 0):
        raise ValidationError(
            "domain-adversarial training requires unlabeled target frames; "
            "pass target_images from the designated target split"
        )
    tgt_tensor = images_to_tensor(target_images) if use_domain else None

    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)
    rng_batches = _stream_rng(config.seed, "batches")
    rng_target = _stream_rng(config.seed, "target_batches")

    record = RunRecord(
        arch_id=model.arch_id, regime=regime, seed=config.seed,
        config=_config_snapshot(config),
    )
    curve_keys = ["train_loss", "val_loss", "train_acc", "val_acc", "loss_cls"]
    if use_timing:
        curve_keys.append("loss_time")
    if use_domain:
        curve_keys += ["loss_dom", "domain_acc", "grl_lambda"]
    record.curves = {k: [] for k in curve_keys}

    steps_per_epoch = max(int(np.ceil(len(train_idx) / config.batch_size)), 1)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    tracker = _BestTracker()
    step_time = 0.0
    images_seen = 0
    since_best = 0
    global_step = 0

    for epoch in range(config.epochs):
        model.train_mode()
        perm = rng_batches.permutation(len(train_idx))
        tgt_perm = rng_target.permutation(len(tgt_tensor)) if use_domain else None
        tgt_pos = 0
        sums = {k: 0.0 for k in ("loss", "cls", "time", "dom", "correct", "dom_correct")}
        n_frames = 0
        n_dom = 0
        for batch_idx, chunk in enumerate(_batch_chunks(perm, config.batch_size)):
            idx = torch.from_numpy(train_idx[chunk])
            t0 = time.perf_counter()
            feats = model.trainable_features(images[idx])
            cls_probs = model.heads["classification"](feats)
            cls = classification_loss(cls_probs, labels[idx])
            loss = w.w_cls * cls
            time_val = dom_val = None
            if use_timing:
                time_val = timing_loss(model.heads["timing"](feats), timings[idx])
                loss = loss + w.w_time * time_val
            if use_domain:
                lam = grl_schedule(global_step / total_steps) if schedule else lam_const
                model.grl.lam = lam
                take = min(len(chunk), len(tgt_tensor))
                if tgt_pos + take > len(tgt_perm):
                    tgt_perm = rng_target.permutation(len(tgt_tensor))
                    tgt_pos = 0
                tgt_idx = torch.from_numpy(tgt_perm[tgt_pos : tgt_pos + take])
                tgt_pos += take
                tgt_feats = model.trainable_features(tgt_tensor[tgt_idx])
                dom_feats = torch.cat([feats, tgt_feats], dim=0)
                dom_labels = torch.cat(
                    [torch.zeros(len(chunk)), torch.ones(take)]
                )
                dom_probs = model.head_output("domain", dom_feats)
                dom_val = classification_loss(dom_probs, dom_labels)
                loss = loss + w.w_dom * dom_val
                sums["dom_correct"] += float(((dom_probs.detach() >= 0.5).float() == dom_labels).sum())
                n_dom += len(dom_labels)
            _check_finite(loss, epoch, batch_idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_time += time.perf_counter() - t0
            images_seen += len(chunk)
            global_step += 1
            n_frames += len(chunk)
            sums["loss"] += float(loss.detach()) * len(chunk)
            sums["cls"] += float(cls.detach()) * len(chunk)
            if time_val is not None:
                sums["time"] += float(time_val.detach()) * len(chunk)
            if dom_val is not None:
                sums["dom"] += float(dom_val.detach()) * len(chunk)
            sums["correct"] += float(((cls_probs.detach() >= 0.5).float() == labels[idx]).sum())

        val_loss, val_acc = _eval_frames(model, images, labels, val_idx)
        record.curves["train_loss"].append(sums["loss"] / n_frames)
        record.curves["train_acc"].append(sums["correct"] / n_frames)
        record.curves["loss_cls"].append(sums["cls"] / n_frames)
        if use_timing:
            record.curves["loss_time"].append(sums["time"] / n_frames)
        if use_domain:
            record.curves["loss_dom"].append(sums["dom"] / n_frames)
            record.curves["domain_acc"].append(sums["dom_correct"] / max(n_dom, 1))
            record.curves["grl_lambda"].append(model.grl.lam)
        record.curves["val_loss"].append(val_loss)
        record.curves["val_acc"].append(val_acc)
        record.epochs_run = epoch + 1

        if tracker.update(epoch, val_acc, val_loss, model):
            since_best = 0
        else:
            since_best += 1
            if config.early_stopping is not None and since_best >= config.early_stopping:
                break

    record.best_epoch = tracker.epoch
    tracker.restore(model)
    _finish_record(record, model, config, step_time, images_seen, started)
    return record


def _eval_frames(model: ModelHandle, images, labels, idx) -> tuple[float, float]:
    if len(idx) == 0:
        return float("nan"), float("nan")
    model.eval_mode()
    with torch.no_grad():
        idx_t = torch.from_numpy(np.asarray(idx))
        probs = model.heads["classification"](model.trainable_features(images[idx_t]))
        loss = float(classification_loss(probs, labels[idx_t]))
        acc = float(((probs >= 0.5).float() == labels[idx_t]).float().mean())
    model.train_mode()
    return loss, acc


# ---------------------------------------------------------------------------
# Sequence training (ATTN_RNN, TRANSFORMER)
# ---------------------------------------------------------------------------


def _prepare_windows(model: ModelHandle, dataset: TaskDataset):
    if not dataset.train_demos:
        raise ValidationError(f"dataset {dataset.task_id!r} has no training demonstrations")
    samples = []
    for demo in dataset.train_demos:
        images = np.stack([preprocess_image(f.pixels) for f in demo.frames])
        feats = model.frame_features(images)
        samples.extend(build_sequence_samples(feats, demo.labels, WINDOW_LENGTH))
    feats = torch.from_numpy(np.stack([s.feature_window for s in samples])).float()
    labels = torch.from_numpy(np.stack([s.label_window for s in samples])).long()
    pad = torch.from_numpy(np.stack([s.pad_mask for s in samples])).bool()
    return feats, labels, pad


def _pretrain_embedder(model: ModelHandle, dataset: TaskDataset, config: TrainConfig):
    """Train the sequence model's backbone as a supervised frame classifier.

    The sequence networks consume features from the FCN model; that model is
    first fitted on the same data (identically to a plain FCN run, since the
    shared components start from the same per-component seeds), then frozen as
    the per-frame embedder.
    """
    from .models import build_model  # local import to avoid cycle at module load

    embedder = build_model("FCN", model.backbone_config, model.head_config, seed=model.seed)
    embedder.backbone = model.backbone  # share and train the handle's backbone in place
    _frame_loop(embedder, dataset, replace(config, out_dir=None),
                regime="embedder", use_timing=False)


def _sequence_loop(model: ModelHandle, dataset: TaskDataset, config: TrainConfig) -> RunRecord:
    config.validate()
    _apply_thread_config(config)
    started = time.perf_counter()
    _pretrain_embedder(model, dataset, config)
    feats, labels, pad = _prepare_windows(model, dataset)
    train_idx, val_idx = _split_indices(len(feats), [len(feats)], config)

    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)
    rng_batches = _stream_rng(config.seed, "batches")
    record = RunRecord(
        arch_id=model.arch_id, regime="supervised", seed=config.seed,
        config=_config_snapshot(config),
    )
    record.curves = {k: [] for k in ("train_loss", "val_loss", "train_acc", "val_acc", "loss_cls")}
    tracker = _BestTracker()
    step_time = 0.0
    images_seen = 0
    since_best = 0

    for epoch in range(config.epochs):
        model.train_mode()
        perm = rng_batches.permutation(len(train_idx))
        loss_sum = correct = count = 0.0
        for batch_idx, chunk in enumerate(_batch_chunks(perm, config.batch_size)):
            idx = torch.from_numpy(train_idx[chunk])
            t0 = time.perf_counter()
            probs = model.decode_windows(feats[idx], pad[idx], labels[idx], "teacher_forcing")
            loss = classification_loss(probs.reshape(-1), labels[idx].reshape(-1).float())
            _check_finite(loss, epoch, batch_idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_time += time.perf_counter() - t0
            images_seen += len(chunk)
            n = probs.numel()
            loss_sum += float(loss.detach()) * n
            correct += float(((probs.detach() >= 0.5).long() == labels[idx]).sum())
            count += n
        val_loss, val_acc = _eval_windows(model, feats, labels, pad, val_idx)
        record.curves["train_loss"].append(loss_sum / count)
        record.curves["loss_cls"].append(loss_sum / count)
        record.curves["train_acc"].append(correct / count)
        record.curves["val_loss"].append(val_loss)
        record.curves["val_acc"].append(val_acc)
        record.epochs_run = epoch + 1
        if tracker.update(epoch, val_acc, val_loss, model):
            since_best = 0
        else:
            since_best += 1
            if config.early_stopping is not None and since_best >= config.early_stopping:
                break

    record.best_epoch = tracker.epoch
    tracker.restore(model)
    _finish_record(record, model, config, step_time, images_seen, started)
    return record


def _eval_windows(model, feats, labels, pad, idx) -> tuple[float, float]:
    if len(idx) == 0:
        return float("nan"), float("nan")
    model.eval_mode()
    with torch.no_grad():
        idx_t = torch.from_numpy(np.asarray(idx))
        probs = model.decode_windows(feats[idx_t], pad[idx_t], labels[idx_t], "teacher_forcing")
        loss = float(classification_loss(probs.reshape(-1), labels[idx_t].reshape(-1).float()))
        acc = float(((probs >= 0.5).long() == labels[idx_t]).float().mean())
    model.train_mode()
    return loss, acc


# ---------------------------------------------------------------------------
# Public regimes
# ---------------------------------------------------------------------------


def train_supervised(model: ModelHandle, dataset: TaskDataset, config: TrainConfig) -> RunRecord:
    """Plain supervised training on the classification loss (80/20 split)."""
    if "classification" not in model.head_names:
        raise CapabilityError(f"{model.arch_id} has no classification head")
    if model.is_sequential:
        return _sequence_loop(model, dataset, config)
    return _frame_loop(model, dataset, config, regime="supervised", use_timing=False)


def train_multitask(model: ModelHandle, dataset: TaskDataset, config: TrainConfig) -> RunRecord:
    """Joint classification + timing training; reduces to supervised at w_time=0."""
    model._require_head("timing")
    return _frame_loop(model, dataset, config, regime="multitask", use_timing=True)


def train_dann(
    model: ModelHandle,
    source_data: TaskDataset,
    target_frames: np.ndarray,
    config: TrainConfig,
) -> RunRecord:
    """Joint adversarial training with gradient reversal on mixed batches.

    ``target_frames`` is an array of unlabeled preprocessed target images; with
    a zero reversal coefficient the run is identical to plain supervised
    training on the source data.
    """
    if model.grl is None or "domain" not in model.head_names:
        raise ValidationError("train_dann requires a DANN-architecture model")
    schedule = isinstance(config.grl_lambda, str)
    if (schedule or float(config.grl_lambda) > 0) and (
        target_frames is None or len(target_frames) == 0
    ):
        raise ValidationError(
            "train_dann needs unlabeled target frames (see unlabeled_images)"
        )
    return _frame_loop(
        model, source_data, config, regime="dann", use_timing=False,
        target_images=target_frames,
    )


def train_adda(
    model: ModelHandle,
    source_data: TaskDataset,
    target_frames: np.ndarray,
    config: TrainConfig,
) -> tuple[RunRecord, RunRecord]:
    """Two-stage adversarial-discriminative adaptation.

    Stage 1 trains encoder + classifier on source data (multitask when the
    architecture has a timing head). Stage 2 clones the encoder for the target
    domain, freezes the classifier, and alternates discriminator steps with
    target-encoder steps. Afterwards the passed-in handle holds the adapted
    target encoder; the source-stage model is preserved via its checkpoint and
    returned record.
    """
    if model.grl is not None or "domain" not in model.head_names:
        raise ValidationError("train_adda requires an ADDA or T_FCN_ADDA model")
    if target_frames is None or len(target_frames) == 0:
        raise ValidationError(
            "train_adda needs unlabeled target frames (see unlabeled_images)"
        )
    config.validate()
    _apply_thread_config(config)

    stage1_config = replace(config, out_dir=None)
    if "timing" in model.head_names:
        source_record = _frame_loop(
            model, source_data, stage1_config, regime="multitask", use_timing=True
        )
    else:
        source_record = _frame_loop(
            model, source_data, stage1_config, regime="supervised", use_timing=False
        )
    source_record.regime = "adda_source"
    if config.out_dir is not None:
        out = Path(config.out_dir) / "source"
        source_record.checkpoint_path = str(save_checkpoint(model, out / "checkpoint"))
        save_run_record(source_record, out)

    adapted_record = _adda_stage2(model, source_data, target_frames, config)
    return source_record, adapted_record


def _adda_stage2(
    model: ModelHandle,
    source_data: TaskDataset,
    target_frames: np.ndarray,
    config: TrainConfig,
) -> RunRecord:
    started = time.perf_counter()
    images, labels, _, demo_sizes = _prepare_frame_tensors(source_data)
    train_idx, val_idx = _split_indices(len(images), demo_sizes, config)
    tgt_tensor = images_to_tensor(target_frames)

    source_encoder = model.backbone
    target_encoder = FcnBackbone(model.backbone_config)
    target_encoder.load_state_dict(source_encoder.state_dict())
    discriminator = model.heads["domain"]

    adv_epochs = config.adversarial_epochs if config.adversarial_epochs is not None else config.epochs
    # The discriminator must stay ahead of the encoder or the pair seesaws and
    # the encoder drifts off the frozen classifier: train D at half the
    # supervised rate and the encoder ten times slower than D.
    d_lr = config.adversarial_lr if config.adversarial_lr is not None else config.learning_rate / 2.0
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=d_lr)
    opt_g = torch.optim.Adam(target_encoder.parameters(), lr=d_lr / 10.0)
    rng_src = _stream_rng(config.seed, "adda_source")
    rng_tgt = _stream_rng(config.seed, "adda_target")

    record = RunRecord(
        arch_id=model.arch_id, regime="adda_adapt", seed=config.seed,
        config=_config_snapshot(config),
    )
    record.curves = {
        k: [] for k in ("train_loss", "val_loss", "train_acc", "val_acc",
                        "disc_loss", "disc_acc", "enc_loss")
    }
    step_time = 0.0
    images_seen = 0
    low_disc_streak = 0

    for epoch in range(adv_epochs):
        model.train_mode()
        target_encoder.train()
        tgt_perm = rng_tgt.permutation(len(tgt_tensor))
        src_perm = rng_src.permutation(len(train_idx))
        src_pos = 0
        sums = {"d": 0.0, "g": 0.0, "correct": 0.0, "n_d": 0, "n_g": 0}
        for batch_idx, tgt_chunk in enumerate(_batch_chunks(tgt_perm, config.batch_size)):
            take = min(config.batch_size, len(train_idx))
            if src_pos + take > len(src_perm):
                src_perm = rng_src.permutation(len(train_idx))
                src_pos = 0
            src_chunk = src_perm[src_pos : src_pos + take]
            src_pos += take
            t0 = time.perf_counter()

            src_idx = torch.from_numpy(train_idx[src_chunk])
            tgt_idx = torch.from_numpy(tgt_chunk)
            with torch.no_grad():
                f_src = source_encoder(images[src_idx])
                f_tgt_d = target_encoder(tgt_tensor[tgt_idx])
            d_in = torch.cat([f_src, f_tgt_d], dim=0)
            d_labels = torch.cat([torch.zeros(len(src_chunk)), torch.ones(len(tgt_chunk))])
            d_probs = discriminator(d_in)
            d_loss = classification_loss(d_probs, d_labels)
            _check_finite(d_loss, epoch, batch_idx)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            f_tgt = target_encoder(tgt_tensor[tgt_idx])
            g_probs = discriminator(f_tgt)
            g_loss = classification_loss(g_probs, torch.zeros(len(tgt_chunk)))
            _check_finite(g_loss, epoch, batch_idx)
            opt_g.zero_grad()
            opt_d.zero_grad()  # discard discriminator grads from the encoder step
            g_loss.backward()
            opt_g.step()

            step_time += time.perf_counter() - t0
            images_seen += len(tgt_chunk) + len(src_chunk)
            sums["d"] += float(d_loss.detach()) * len(d_labels)
            sums["n_d"] += len(d_labels)
            sums["g"] += float(g_loss.detach()) * len(tgt_chunk)
            sums["n_g"] += len(tgt_chunk)
            sums["correct"] += float(((d_probs.detach() >= 0.5).float() == d_labels).sum())

        disc_loss = sums["d"] / max(sums["n_d"], 1)
        disc_acc = sums["correct"] / max(sums["n_d"], 1)
        enc_loss = sums["g"] / max(sums["n_g"], 1)

        # Source-val classification through the adapted encoder, as a drift probe.
        swap = model.backbone
        model.backbone = target_encoder
        val_loss, val_acc = _eval_frames(model, images, labels, val_idx)
        model.backbone = swap

        record.curves["train_loss"].append(enc_loss + disc_loss)
        record.curves["train_acc"].append(disc_acc)
        record.curves["disc_loss"].append(disc_loss)
        record.curves["disc_acc"].append(disc_acc)
        record.curves["enc_loss"].append(enc_loss)
        record.curves["val_loss"].append(val_loss)
        record.curves["val_acc"].append(val_acc)
        record.epochs_run = epoch + 1

        low_disc_streak = low_disc_streak + 1 if disc_loss < 0.05 else 0
        if low_disc_streak == 10:
            record.warnings.append(
                f"discriminator loss below 0.05 for 10 consecutive epochs "
                f"(through epoch {epoch}); stage-2 adaptation may have diverged"
            )

    # The handle now serves target-domain inference: adapted encoder + frozen
    # source classifier (and timing head, if any).
    model.backbone = target_encoder
    _finish_record(record, model, config, step_time, images_seen, started, subdir="adapted")
    return record


def train_architecture(
    model: ModelHandle,
    dataset: TaskDataset,
    config: TrainConfig,
    target_frames: np.ndarray | None = None,
) -> RunRecord:
    """Train a model under the regime its architecture calls for.

    NASNET/FCN and the sequence architectures train supervised; T_FCN trains
    multitask; DANN and ADDA/T_FCN_ADDA additionally consume unlabeled target
    frames (taken from the dataset's target split when not supplied). Returns
    the record of the run that produced the final inference model (for ADDA,
    the adaptation stage).
    """
    arch = model.arch_id
    if arch in ("DANN", "ADDA", "T_FCN_ADDA"):
        if target_frames is None:
            if not dataset.test_demos:
                raise ValidationError(
                    f"{arch} needs unlabeled target frames but dataset "
                    f"{dataset.task_id!r} has no target split"
                )
            target_frames = unlabeled_images(dataset.test_demos)
        if arch == "DANN":
            return train_dann(model, dataset, target_frames, config)
        _, adapted = train_adda(model, dataset, target_frames, config)
        return adapted
    if arch == "T_FCN":
        return train_multitask(model, dataset, config)
    return train_supervised(model, dataset, config)
