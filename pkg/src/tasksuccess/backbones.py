"""Image feature extractors: the 6-block fully convolutional backbone and a
pluggable frozen pretrained-extractor adapter.

All architectures share one of these two feature paths. The FCN backbone is the
trainable core; the pretrained adapter wraps an externally supplied frozen
network (a small fixed-random convnet stand-in is provided for desk-scale use,
so nothing needs downloading).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .exceptions import ConfigurationError, ShapeError, ValidationError


def derive_seed(seed: int, name: str) -> int:
    """Stable per-component seed so shared components initialize identically
    across architectures built from the same base seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def make_generator(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, name))
    return gen


def _init_uniform(param: torch.Tensor, bound: float, gen: torch.Generator):
    with torch.no_grad():
        param.uniform_(-bound, bound, generator=gen)


def init_module(module: nn.Module, gen: torch.Generator):
    """Seeded re-initialization of all supported layer types in `module`.

    Uses the fan-in uniform scheme (the torch default for linear/conv layers)
    but drawn from an explicit generator, so initialization depends only on the
    module structure and the generator state, never on global RNG.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            _init_uniform(m.weight, bound, gen)
            if m.bias is not None:
                _init_uniform(m.bias, bound, gen)
        elif isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            _init_uniform(m.weight, bound, gen)
            if m.bias is not None:
                _init_uniform(m.bias, bound, gen)
        elif isinstance(m, (nn.LSTM, nn.LSTMCell)):
            bound = 1.0 / math.sqrt(m.hidden_size)
            for name, param in m.named_parameters(recurse=False):
                _init_uniform(param, bound, gen)
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=gen)
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


@dataclass
class BackboneConfig:
    """Structural parameters of the convolutional backbone.

    The default matches the reference layout: six stride-2 conv blocks with
    channels (16, 32, 64, 64, 128, 128), 3x3 kernels, a final 1x1 convolution
    to ``feature_dim`` channels, and global average pooling.
    """

    channels: tuple[int, ...] = (16, 32, 64, 64, 128, 128)
    kernel_size: int = 3
    feature_dim: int = 256
    in_channels: int = 3
    input_hw: tuple[int, int] = (160, 160)
    extractor: dict = field(default_factory=dict)  # NASNET-role extractor spec

    def validate(self):
        if len(self.channels) != 6:
            raise ValidationError(
                f"backbone needs exactly 6 conv blocks, got {len(self.channels)} channels"
            )
        if any(c < 1 for c in self.channels):
            raise ValidationError("backbone channel counts must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError("kernel_size must be a positive odd integer")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")


class FcnBackbone(nn.Module):
    """Six stride-2 conv blocks plus one 1x1 conv and global average pooling.

    Input: (N, C, H, W) with (H, W) == config.input_hw. Output: (N, feature_dim).
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.config.validate()
        layers: list[nn.Module] = []
        c_in = self.config.in_channels
        k = self.config.kernel_size
        for c_out in self.config.channels:
            layers += [nn.Conv2d(c_in, c_out, k, stride=2, padding=k // 2), nn.ReLU()]
            c_in = c_out
        layers += [nn.Conv2d(c_in, self.config.feature_dim, 1), nn.ReLU()]
        self.blocks = nn.Sequential(*layers)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_input(self, x: torch.Tensor):
        h, w = self.config.input_hw
        c = self.config.in_channels
        if x.ndim != 4 or x.shape[1] != c or x.shape[2] != h or x.shape[3] != w:
            raise ShapeError(
                f"backbone expects images of shape {h}x{w}x{c}, got input tensor "
                f"shape {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        maps = self.blocks(x)
        return maps.mean(dim=(2, 3))


class RandomConvExtractor(nn.Module):
    """Small frozen random convnet standing in for an ImageNet-pretrained model.

    Features are pooled over a 2x2 spatial grid (so small moving objects are
    not averaged away) and normalized per sample, which keeps the random
    features well conditioned for the trainable stack on top.
    """

    def __init__(self, seed: int = 0, output_dim: int = 128, in_channels: int = 3):
        super().__init__()
        if output_dim % 4 != 0:
            raise ValidationError(f"standin output_dim must be divisible by 4, got {output_dim}")
        self.output_dim = output_dim
        chans = output_dim // 4
        mid = max(chans // 2, 4)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, mid, 5, stride=4, padding=2),
            nn.ReLU(),
            nn.Conv2d(mid, mid * 2, 3, stride=4, padding=1),
            nn.ReLU(),
            nn.Conv2d(mid * 2, chans, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.norm = nn.LayerNorm(output_dim, elementwise_affine=False)
        init_module(self.net, make_generator(seed, "random_extractor"))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        maps = self.net(x)
        pooled = torch.nn.functional.adaptive_avg_pool2d(maps, (2, 2))
        return self.norm(pooled.flatten(1))


class PretrainedExtractor(nn.Module):
    """Adapter over an externally supplied feature extractor.

    The wrapped network is frozen by default: its parameters never receive
    gradients and repeated calls on the same batch are bitwise identical.
    """

    def __init__(self, extractor: nn.Module | None, output_dim: int, frozen: bool = True):
        super().__init__()
        if extractor is None:
            raise ConfigurationError(
                "PretrainedExtractor requires an extractor module; use "
                "PretrainedExtractor.random_standin() for a desk-scale stand-in"
            )
        self.extractor = extractor
        self.output_dim = output_dim
        self.frozen = frozen
        if frozen:
            for p in self.extractor.parameters():
                p.requires_grad_(False)

    @classmethod
    def random_standin(cls, seed: int = 0, output_dim: int = 128) -> "PretrainedExtractor":
        return cls(RandomConvExtractor(seed=seed, output_dim=output_dim), output_dim)

    @classmethod
    def from_spec(cls, spec: dict) -> "PretrainedExtractor":
        kind = spec.get("kind", "random_standin")
        if kind != "random_standin":
            raise ConfigurationError(
                f"cannot construct extractor of kind {kind!r} from a spec; pass the "
                "module programmatically"
            )
        return cls.random_standin(
            seed=int(spec.get("seed", 0)), output_dim=int(spec.get("output_dim", 128))
        )

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.frozen:
            with torch.no_grad():
                out = self.extractor(x)
        else:
            out = self.extractor(x)
        if out.ndim != 2 or out.shape[1] != self.output_dim:
            raise ShapeError(
                f"extractor returned shape {tuple(out.shape)}, expected "
                f"(batch, {self.output_dim})"
            )
        return out


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """Convert a (N, H, W, 3) float array of preprocessed images to NCHW float32."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got shape {tuple(images.shape)}")
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()


def fcn_features(backbone: FcnBackbone, images: np.ndarray) -> np.ndarray:
    """Inference-mode feature vectors (N, F) for a batch of preprocessed images."""
    backbone.eval()
    with torch.no_grad():
        feats = backbone(images_to_tensor(images))
    return feats.numpy()


def pretrained_features(extractor: PretrainedExtractor, images: np.ndarray) -> np.ndarray:
    """Feature vectors from the frozen pretrained extractor; repeated calls are
    bitwise identical."""
    extractor.eval()
    with torch.no_grad():
        feats = extractor(images_to_tensor(images))
    return feats.numpy()
