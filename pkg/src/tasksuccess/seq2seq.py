"""Sequence classifiers over fixed-length frame windows.

Two networks consume per-frame convolutional features: an LSTM encoder-decoder
with additive attention, and a causally masked transformer decoder. Both are
trained with teacher forcing (ground-truth previous labels as decoder input)
and decoded autoregressively at inference, seeded with label 0.

Per-frame probabilities come from the last position of each sliding window, so
every frame is predicted exactly once using its full history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import window_index_map
from .exceptions import ShapeError, ValidationError

#: History length consumed by the sequence models.
WINDOW_LENGTH = 10

MODES = ("teacher_forcing", "autoregressive")


@dataclass
class SequenceSample:
    """One training window: per-frame features, labels, and left-pad flags."""

    feature_window: np.ndarray  # (window, F) float32
    label_window: np.ndarray    # (window,) in {0, 1}
    pad_mask: np.ndarray        # (window,) 1 at left-padded positions

    def __post_init__(self):
        w = len(self.feature_window)
        if len(self.label_window) != w or len(self.pad_mask) != w:
            raise ValidationError("sequence sample fields must have equal window length")


def build_sequence_samples(
    features: np.ndarray, labels: np.ndarray, window: int = WINDOW_LENGTH
) -> list[SequenceSample]:
    """Windows over one demo's per-frame features, one sample ending at each frame."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2:
        raise ShapeError(f"expected (j, F) features, got shape {tuple(features.shape)}")
    if len(labels) != len(features):
        raise ValidationError("features and labels must have equal length")
    indices, pad = window_index_map(len(features), window)
    return [
        SequenceSample(features[idx], labels[idx], pad_row)
        for idx, pad_row in zip(indices, pad)
    ]


def _stack_windows(samples: list[SequenceSample]):
    feats = torch.from_numpy(np.stack([s.feature_window for s in samples])).float()
    labels = torch.from_numpy(np.stack([s.label_window for s in samples])).long()
    pad = torch.from_numpy(np.stack([s.pad_mask for s in samples])).bool()
    return feats, labels, pad


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValidationError(f"decode mode must be one of {MODES}, got {mode!r}")


class BahdanauAttention(nn.Module):
    """Additive attention: score(q, k) = v . tanh(Wq q + Wk k)."""

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int = 64):
        super().__init__()
        self.query_proj = nn.Linear(query_dim, attn_dim, bias=False)
        self.key_proj = nn.Linear(key_dim, attn_dim, bias=False)
        self.score = nn.Linear(attn_dim, 1, bias=False)

    def forward(
        self, query: torch.Tensor, keys: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """query: (B, Hq); keys: (B, T, Hk); pad_mask: (B, T) True at masked keys.

        Returns (context (B, Hk), weights (B, T)); weights are non-negative and
        sum to 1 over unmasked positions.
        """
        scores = self.score(torch.tanh(self.query_proj(query)[:, None, :] + self.key_proj(keys)))
        scores = scores.squeeze(-1)
        if pad_mask is not None:
            if bool(pad_mask.all(dim=1).any()):
                raise ValidationError("attention requires at least one unmasked position")
            scores = scores.masked_fill(pad_mask, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        context = torch.bmm(weights.unsqueeze(1), keys).squeeze(1)
        return context, weights


class AttnEncoderDecoder(nn.Module):
    """LSTM encoder over feature windows; LSTM decoder with additive attention.

    The decoder consumes an embedding of the previous label (one-hot sized
    vocabulary {0, 1}) plus the attention context, and emits one success
    probability per window position.
    """

    def __init__(self, feature_dim: int, hidden_dim: int = 128, attn_dim: int = 64,
                 label_embed_dim: int = 16):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.encoder = nn.LSTM(feature_dim, hidden_dim, batch_first=True)
        self.attention = BahdanauAttention(hidden_dim, hidden_dim, attn_dim)
        self.label_embed = nn.Embedding(2, label_embed_dim)
        self.cell = nn.LSTMCell(label_embed_dim + hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim * 2, 1)

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        """Encoder states (B, T, H) for feature windows (B, T, F)."""
        if features.ndim != 3 or features.shape[2] != self.feature_dim:
            raise ShapeError(
                f"expected (B, T, {self.feature_dim}) feature windows, got "
                f"{tuple(features.shape)}"
            )
        states, _ = self.encoder(features)
        return states

    def attend(self, query: torch.Tensor, keys: torch.Tensor,
               pad_mask: torch.Tensor | None = None):
        return self.attention(query, keys, pad_mask)

    def decode(
        self,
        features: torch.Tensor,
        pad_mask: torch.Tensor | None,
        labels: torch.Tensor | None,
        mode: str,
        return_attention: bool = False,
    ):
        """Success probabilities (B, T) for feature windows (B, T, F).

        teacher_forcing feeds ground-truth previous labels (``labels`` required);
        autoregressive feeds thresholded previous predictions, starting from
        label 0 at the first step.
        """
        _check_mode(mode)
        if mode == "teacher_forcing" and labels is None:
            raise ValidationError("teacher_forcing mode requires the label windows")
        states = self.encode(features)
        b, t, _ = states.shape
        _, (h_n, c_n) = self.encoder(features)
        h, c = h_n.squeeze(0), c_n.squeeze(0)
        prev = torch.zeros(b, dtype=torch.long)
        probs, attn = [], []
        for step in range(t):
            context, weights = self.attention(h, states, pad_mask)
            h, c = self.cell(torch.cat([self.label_embed(prev), context], dim=1), (h, c))
            p = torch.sigmoid(self.out(torch.cat([h, context], dim=1))).squeeze(1)
            probs.append(p)
            attn.append(weights)
            if mode == "teacher_forcing":
                prev = labels[:, step]
            else:
                prev = (p >= 0.5).long()
        probs = torch.stack(probs, dim=1)
        if return_attention:
            return probs, torch.stack(attn, dim=1)
        return probs


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    i = torch.arange(dim // 2, dtype=torch.float32)[None, :]
    angles = pos / torch.pow(10000.0, 2 * i / dim)
    enc = torch.zeros(length, dim)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles)
    return enc


class MultiHeadAttention(nn.Module):
    """Scaled dot-product multi-head attention with explicit weight exposure."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValidationError(f"model dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self, query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """mask: (Tq, Tk) True where attention is BLOCKED.

        Returns (output (B, Tq, D), weights (B, heads, Tq, Tk)).
        """
        b, tq, _ = query.shape
        tk = keys.shape[1]
        def split(x, t):
            return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        q = split(self.q_proj(query), tq)
        k = split(self.k_proj(keys), tk)
        v = split(self.v_proj(values), tk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, tq, self.dim)
        return self.out_proj(out), weights


class TransformerDecoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, ff_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, memory, self_mask, cross_mask):
        attn_out, self_w = self.self_attn(x, x, x, self_mask)
        x = self.norm1(x + attn_out)
        attn_out, cross_w = self.cross_attn(x, memory, memory, cross_mask)
        x = self.norm2(x + attn_out)
        x = self.norm3(x + self.ff(x))
        return x, self_w, cross_w


def causal_mask(t: int) -> torch.Tensor:
    """(t, t) boolean mask, True above the diagonal (future positions blocked)."""
    return torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)


class TransformerNet(nn.Module):
    """Causally masked transformer decoder over frame features.

    Input tokens are embeddings of the previous label (shifted right, start
    token = label 0); each position cross-attends to the frame features at
    positions <= its own, so output k never depends on frames after k.
    """

    def __init__(self, feature_dim: int, d_model: int = 128, num_heads: int = 4,
                 num_layers: int = 2, ff_dim: int = 256):
        super().__init__()
        self.feature_dim = feature_dim
        self.d_model = d_model
        self.feature_proj = nn.Linear(feature_dim, d_model)
        self.label_embed = nn.Embedding(2, d_model)
        self.layers = nn.ModuleList(
            TransformerDecoderLayer(d_model, num_heads, ff_dim) for _ in range(num_layers)
        )
        self.out = nn.Linear(d_model, 1)
        self.last_attention: list[tuple[torch.Tensor, torch.Tensor]] = []

    def _forward_tokens(self, features: torch.Tensor, prev_labels: torch.Tensor):
        b, t, _ = features.shape
        pe = sinusoidal_positions(t, self.d_model)
        memory = self.feature_proj(features) + pe[None]
        x = self.label_embed(prev_labels) + pe[None]
        mask = causal_mask(t)
        self.last_attention = []
        for layer in self.layers:
            x, self_w, cross_w = layer(x, memory, mask, mask)
            self.last_attention.append((self_w, cross_w))
        return torch.sigmoid(self.out(x)).squeeze(-1)

    def decode(
        self,
        features: torch.Tensor,
        pad_mask: torch.Tensor | None,
        labels: torch.Tensor | None,
        mode: str,
    ) -> torch.Tensor:
        """Success probabilities (B, T); same modes as the recurrent decoder.

        Left-padded positions hold first-frame copies and stay attendable; the
        causal mask alone enforces the information-flow contract.
        """
        _check_mode(mode)
        if features.ndim != 3 or features.shape[2] != self.feature_dim:
            raise ShapeError(
                f"expected (B, T, {self.feature_dim}) feature windows, got "
                f"{tuple(features.shape)}"
            )
        b, t, _ = features.shape
        if mode == "teacher_forcing":
            if labels is None:
                raise ValidationError("teacher_forcing mode requires the label windows")
            prev = torch.cat([torch.zeros(b, 1, dtype=torch.long), labels[:, :-1]], dim=1)
            return self._forward_tokens(features, prev)
        prev = torch.zeros(b, t, dtype=torch.long)
        probs = None
        for step in range(t):
            probs = self._forward_tokens(features, prev)
            if step + 1 < t:
                prev[:, step + 1] = (probs[:, step] >= 0.5).long()
        return probs
