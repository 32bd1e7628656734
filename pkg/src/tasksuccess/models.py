"""Heads, gradient reversal, architecture assembly, and checkpoint I/O.

Eight architecture IDs are supported. NASNET runs a frozen pretrained-role
extractor into a fully connected stack; all others share the convolutional
backbone. Sequence architectures (ATTN_RNN, TRANSFORMER) treat the backbone as
a frozen per-frame feature extractor and classify windows.

Parameter initialization is seeded per component (backbone, heads, ...), so
architectures that share components initialize them identically for the same
base seed. That is what makes the training-regime reduction identities hold
bitwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbones import (
    BackboneConfig,
    FcnBackbone,
    PretrainedExtractor,
    images_to_tensor,
    init_module,
    make_generator,
)
from .data import FrameBatch
from .exceptions import CapabilityError, ShapeError, ValidationError
from .seq2seq import WINDOW_LENGTH, AttnEncoderDecoder, TransformerNet, window_index_map

ARCH_IDS = (
    "NASNET",
    "FCN",
    "T_FCN",
    "ATTN_RNN",
    "TRANSFORMER",
    "DANN",
    "ADDA",
    "T_FCN_ADDA",
)

#: Heads owned by each architecture; total over all eight IDs.
ARCH_HEADS: dict[str, frozenset[str]] = {
    "NASNET": frozenset({"classification"}),
    "FCN": frozenset({"classification"}),
    "T_FCN": frozenset({"classification", "timing"}),
    "ATTN_RNN": frozenset({"classification"}),
    "TRANSFORMER": frozenset({"classification"}),
    "DANN": frozenset({"classification", "domain"}),
    "ADDA": frozenset({"classification", "domain"}),
    "T_FCN_ADDA": frozenset({"classification", "timing", "domain"}),
}

SEQ_ARCHS = ("ATTN_RNN", "TRANSFORMER")

CHECKPOINT_FORMAT_VERSION = 1


class _GradReverseFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * (-ctx.lam), None


def grl_apply(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ValidationError(f"gradient reversal coefficient must be >= 0, got {lam}")
    return _GradReverseFn.apply(x, float(lam))


class GradientReversal(nn.Module):
    """Gradient reversal layer; ``lam`` may be rescheduled during training."""

    def __init__(self, lam: float = 1.0):
        super().__init__()
        if lam < 0:
            raise ValidationError(f"gradient reversal coefficient must be >= 0, got {lam}")
        self.lam = float(lam)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return grl_apply(x, self.lam)


class SigmoidHead(nn.Module):
    """Two-layer perceptron head ending in a sigmoid unit."""

    def __init__(self, in_dim: int, hidden_dim: int = 64):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden_dim)
        self.act = nn.ReLU()
        self.out = nn.Linear(hidden_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.out(self.act(self.hidden(x)))).squeeze(-1)


@dataclass
class HeadConfig:
    """Sizes for heads, the NASNET trunk, and the sequence networks."""

    hidden_dim: int = 64
    nasnet_trunk_dims: tuple[int, ...] = (256, 128, 64, 64)
    seq_hidden_dim: int = 128
    seq_attn_dim: int = 64
    transformer_dim: int = 128
    transformer_heads: int = 4
    transformer_layers: int = 2
    transformer_ff_dim: int = 256
    grl_lambda: float = 1.0

    def validate(self):
        if self.hidden_dim < 1:
            raise ValidationError("head hidden_dim must be >= 1")
        if self.grl_lambda < 0:
            raise ValidationError("grl_lambda must be >= 0")


class ModelHandle:
    """An assembled architecture: backbone reference, head set, parameter state.

    Public prediction methods run in inference mode (no gradients, eval mode)
    and are deterministic. Training regimes use :meth:`trainable_features` and
    the heads directly.
    """

    def __init__(
        self,
        arch_id: str,
        backbone_config: BackboneConfig,
        head_config: HeadConfig,
        seed: int,
        extractor: PretrainedExtractor | None = None,
    ):
        if arch_id not in ARCH_IDS:
            raise ValidationError(
                f"unknown arch_id {arch_id!r}; valid IDs: {', '.join(ARCH_IDS)}"
            )
        backbone_config.validate()
        head_config.validate()
        self.arch_id = arch_id
        self.backbone_config = backbone_config
        self.head_config = head_config
        self.seed = seed
        self.mode = "train"

        self.extractor: PretrainedExtractor | None = None
        self.trunk: nn.Module | None = None
        self.backbone: FcnBackbone | None = None
        self.seq_net: nn.Module | None = None
        self.grl: GradientReversal | None = None

        if arch_id == "NASNET":
            if extractor is None:
                spec = backbone_config.extractor or {"kind": "random_standin"}
                extractor = PretrainedExtractor.from_spec(spec)
            self.extractor = extractor
            dims = (extractor.output_dim,) + tuple(head_config.nasnet_trunk_dims)
            layers: list[nn.Module] = []
            for d_in, d_out in zip(dims[:-1], dims[1:]):
                layers += [nn.Linear(d_in, d_out), nn.ReLU()]
            self.trunk = nn.Sequential(*layers)
            init_module(self.trunk, make_generator(seed, "trunk"))
            feature_dim = dims[-1]
        else:
            self.backbone = FcnBackbone(backbone_config)
            init_module(self.backbone, make_generator(seed, "backbone"))
            feature_dim = self.backbone.feature_dim

        if arch_id == "ATTN_RNN":
            self.seq_net = AttnEncoderDecoder(
                feature_dim,
                hidden_dim=head_config.seq_hidden_dim,
                attn_dim=head_config.seq_attn_dim,
            )
            init_module(self.seq_net, make_generator(seed, "seq"))
        elif arch_id == "TRANSFORMER":
            self.seq_net = TransformerNet(
                feature_dim,
                d_model=head_config.transformer_dim,
                num_heads=head_config.transformer_heads,
                num_layers=head_config.transformer_layers,
                ff_dim=head_config.transformer_ff_dim,
            )
            init_module(self.seq_net, make_generator(seed, "seq"))

        self.heads = nn.ModuleDict()
        if arch_id not in SEQ_ARCHS:
            for head_name in sorted(ARCH_HEADS[arch_id]):
                head = SigmoidHead(feature_dim, head_config.hidden_dim)
                init_module(head, make_generator(seed, f"{head_name}_head"))
                self.heads[head_name] = head
        if arch_id == "DANN":
            self.grl = GradientReversal(head_config.grl_lambda)

    # -- structure ---------------------------------------------------------

    @property
    def head_names(self) -> frozenset[str]:
        return ARCH_HEADS[self.arch_id]

    @property
    def is_sequential(self) -> bool:
        return self.arch_id in SEQ_ARCHS

    def _modules(self) -> dict[str, nn.Module]:
        mods: dict[str, nn.Module] = {}
        if self.extractor is not None:
            mods["extractor"] = self.extractor
        if self.trunk is not None:
            mods["trunk"] = self.trunk
        if self.backbone is not None:
            mods["backbone"] = self.backbone
        if self.seq_net is not None:
            mods["seq_net"] = self.seq_net
        mods["heads"] = self.heads
        return mods

    def trainable_modules(self) -> dict[str, nn.Module]:
        """Modules whose parameters the training regimes update.

        The frozen pretrained extractor is excluded; for sequence architectures
        the backbone acts as a fixed per-frame feature extractor and is excluded
        as well.
        """
        mods = self._modules()
        mods.pop("extractor", None)
        if self.is_sequential:
            mods.pop("backbone", None)
        return mods

    def trainable_parameters(self) -> list[nn.Parameter]:
        params: list[nn.Parameter] = []
        for mod in self.trainable_modules().values():
            params.extend(p for p in mod.parameters() if p.requires_grad)
        return params

    def param_count(self) -> int:
        return sum(p.numel() for m in self._modules().values() for p in m.parameters())

    def train_mode(self):
        self.mode = "train"
        for m in self._modules().values():
            m.train()
        return self

    def eval_mode(self):
        self.mode = "infer"
        for m in self._modules().values():
            m.eval()
        return self

    def _require_head(self, name: str):
        if name not in self.head_names:
            raise CapabilityError(
                f"architecture {self.arch_id} has no {name} head "
                f"(heads: {sorted(self.head_names)})"
            )

    # -- differentiable paths (training) ------------------------------------

    def trainable_features(self, images: torch.Tensor) -> torch.Tensor:
        """Feature vectors with gradients flowing to the trainable feature path."""
        if self.arch_id == "NASNET":
            return self.trunk(self.extractor(images))
        return self.backbone(images)

    def head_output(self, head_name: str, features: torch.Tensor) -> torch.Tensor:
        """Head probabilities on feature vectors; DANN's domain head applies GRL."""
        self._require_head(head_name)
        if self.is_sequential:
            raise CapabilityError(
                f"{self.arch_id} predicts via sequence decoding, not frame heads"
            )
        if head_name == "domain" and self.grl is not None:
            features = self.grl(features)
        return self.heads[head_name](features)

    # -- inference ----------------------------------------------------------

    @staticmethod
    def _batch_images(batch: FrameBatch | np.ndarray) -> np.ndarray:
        return batch.images if isinstance(batch, FrameBatch) else np.asarray(batch)

    def _infer_frame_head(self, head_name: str, batch) -> np.ndarray:
        self._require_head(head_name)
        images = self._batch_images(batch)
        self.eval_mode()
        with torch.no_grad():
            probs = self.heads[head_name](self.trainable_features(images_to_tensor(images)))
        return probs.numpy()

    def classify(self, batch: FrameBatch | np.ndarray) -> np.ndarray:
        """Per-frame success probabilities in (0, 1).

        For sequence architectures the batch is interpreted as the ordered
        frames of one demonstration: probabilities come from autoregressive
        decoding of sliding windows, one per frame (last window position).
        """
        if self.is_sequential:
            return self.predict_demo_probs(self._batch_images(batch))
        return self._infer_frame_head("classification", batch)

    def predict_timing(self, batch: FrameBatch | np.ndarray) -> np.ndarray:
        """Completion-proportion estimates in [0, 1]."""
        return self._infer_frame_head("timing", batch)

    def discriminate_domain(self, batch: FrameBatch | np.ndarray) -> np.ndarray:
        """Domain probabilities (0=source, 1=target)."""
        self._require_head("domain")
        images = self._batch_images(batch)
        self.eval_mode()
        with torch.no_grad():
            feats = self.trainable_features(images_to_tensor(images))
            if self.grl is not None:
                feats = self.grl(feats)
            probs = self.heads["domain"](feats)
        return probs.numpy()

    def frame_features(self, images: np.ndarray) -> np.ndarray:
        """Inference-mode per-frame features (used by the sequence path)."""
        self.eval_mode()
        with torch.no_grad():
            if self.arch_id == "NASNET":
                feats = self.trunk(self.extractor(images_to_tensor(images)))
            else:
                feats = self.backbone(images_to_tensor(images))
        return feats.numpy()

    def decode_windows(
        self,
        feature_windows: torch.Tensor,
        pad_mask: torch.Tensor | None,
        labels: torch.Tensor | None,
        mode: str,
    ) -> torch.Tensor:
        """Sequence decode (differentiable); only for ATTN_RNN / TRANSFORMER."""
        if not self.is_sequential:
            raise CapabilityError(f"{self.arch_id} is not a sequence architecture")
        return self.seq_net.decode(feature_windows, pad_mask, labels, mode)

    def predict_demo_probs(self, images: np.ndarray, window: int = WINDOW_LENGTH) -> np.ndarray:
        """One probability per frame of an ordered demo (sequence architectures).

        Windows are left-padded by repeating the first frame; each frame's
        probability is read from the last position of its window.
        """
        if not self.is_sequential:
            return self.classify(images)
        if len(images) < 1:
            raise ShapeError("need at least one frame")
        feats = self.frame_features(images)
        indices, pad = window_index_map(len(images), window)
        feature_windows = torch.from_numpy(feats[indices]).float()
        pad_mask = torch.from_numpy(pad).bool()
        self.eval_mode()
        with torch.no_grad():
            probs = self.seq_net.decode(feature_windows, pad_mask, None, "autoregressive")
        return probs[:, -1].numpy()


def build_model(
    arch_id: str,
    backbone_config: BackboneConfig | None = None,
    head_config: HeadConfig | None = None,
    seed: int = 0,
    extractor: PretrainedExtractor | None = None,
) -> ModelHandle:
    """Assemble an architecture with seeded, per-component deterministic init."""
    return ModelHandle(
        arch_id,
        backbone_config or BackboneConfig(),
        head_config or HeadConfig(),
        seed,
        extractor=extractor,
    )


# ---------------------------------------------------------------------------
# Checkpoint format: params.bin + params_index.json + model.json
# ---------------------------------------------------------------------------


def _full_state_dict(handle: ModelHandle) -> dict[str, torch.Tensor]:
    state: dict[str, torch.Tensor] = {}
    for mod_name, mod in handle._modules().items():
        for key, tensor in mod.state_dict().items():
            state[f"{mod_name}.{key}"] = tensor
    return state


def save_checkpoint(handle: ModelHandle, out_dir: str | Path) -> Path:
    """Write params.bin (flat little-endian float32 blob), its index, and model.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = _full_state_dict(handle)
    index: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().numpy().astype("<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.size
    (out_dir / "params.bin").write_bytes(b"".join(chunks))
    (out_dir / "params_index.json").write_text(json.dumps(index, indent=2))
    model_meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch_id": handle.arch_id,
        "seed": handle.seed,
        "backbone_config": asdict(handle.backbone_config),
        "head_config": asdict(handle.head_config),
    }
    (out_dir / "model.json").write_text(json.dumps(model_meta, indent=2))
    return out_dir


def load_checkpoint(ckpt_dir: str | Path) -> ModelHandle:
    """Rebuild a ModelHandle from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "model.json"
    if not meta_path.exists():
        raise ValidationError(f"no model.json under {ckpt_dir}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint format_version {meta.get('format_version')}"
        )
    b_cfg = meta["backbone_config"]
    b_cfg["channels"] = tuple(b_cfg["channels"])
    b_cfg["input_hw"] = tuple(b_cfg["input_hw"])
    h_cfg = meta["head_config"]
    h_cfg["nasnet_trunk_dims"] = tuple(h_cfg["nasnet_trunk_dims"])
    handle = build_model(
        meta["arch_id"],
        BackboneConfig(**b_cfg),
        HeadConfig(**h_cfg),
        seed=meta["seed"],
    )
    blob = np.frombuffer((ckpt_dir / "params.bin").read_bytes(), dtype="<f4")
    index = json.loads((ckpt_dir / "params_index.json").read_text())
    state = _full_state_dict(handle)
    if set(index) != set(state):
        raise ValidationError(
            f"checkpoint parameter names do not match architecture {meta['arch_id']}"
        )
    with torch.no_grad():
        for name, entry in index.items():
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            values = blob[entry["offset"] : entry["offset"] + size].reshape(shape)
            state[name].copy_(torch.from_numpy(values.copy()))
    return handle


def clone_model(handle: ModelHandle) -> ModelHandle:
    """Fresh handle with identical architecture and parameter values."""
    twin = build_model(
        handle.arch_id, handle.backbone_config, handle.head_config, handle.seed
    )
    src = _full_state_dict(handle)
    dst = _full_state_dict(twin)
    with torch.no_grad():
        for name, tensor in dst.items():
            tensor.copy_(src[name])
    return twin
