"""Feature discovery, the transformer encoder array, and the sigmoid label head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class EncoderSequence:
    """Token matrix laid out as ``[features | FD | labels]``."""

    tokens: torch.Tensor  # (n, M, d)
    n_features: int
    n_fd: int
    n_labels: int

    def __post_init__(self):
        m = self.tokens.shape[1]
        if m != self.n_features + self.n_fd + self.n_labels:
            raise ValueError(
                f"sequence length {m} != {self.n_features} + {self.n_fd} + {self.n_labels}"
            )

    @property
    def feature_slice(self) -> slice:
        return slice(0, self.n_features)

    @property
    def fd_slice(self) -> slice:
        return slice(self.n_features, self.n_features + self.n_fd)

    @property
    def label_slice(self) -> slice:
        start = self.n_features + self.n_fd
        return slice(start, start + self.n_labels)

    def label_tokens(self) -> torch.Tensor:
        return self.tokens[:, self.label_slice]

    def replace(self, tokens: torch.Tensor) -> "EncoderSequence":
        return EncoderSequence(tokens, self.n_features, self.n_fd, self.n_labels)


class FeatureDiscovery(nn.Module):
    """Fuse mean-pooled feature tokens and label-state tokens into one FD token.

    The two pooled vectors are stacked as two channels and passed through a
    1-D convolution along the model width.
    """

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.conv = nn.Conv1d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, features: torch.Tensor, label_states: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != label_states.shape[-1]:
            raise ValueError(
                f"feature width {features.shape[-1]} != label-state width {label_states.shape[-1]}"
            )
        pooled = torch.stack([features.mean(dim=1), label_states.mean(dim=1)], dim=1)
        # shifted-sum form of self.conv: batched conv kernels are not batch-invariant on CPU
        k = self.conv.kernel_size[0]
        d = pooled.shape[-1]
        padded = torch.nn.functional.pad(pooled, (k // 2, k // 2))
        w = self.conv.weight[0]  # (2, k)
        out = self.conv.bias.view(1, 1)
        for t in range(k):
            out = out + (padded[:, :, t : t + d] * w[:, t : t + 1]).sum(dim=1)
        return out.unsqueeze(1)  # (n, 1, d)


def check_finite(x: torch.Tensor, what: str) -> None:
    if torch.isnan(x).any():
        raise FloatingPointError(f"NaN in {what}")


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_k = d_model // heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_out = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, m, _ = x.shape
        return x.view(n, m, self.heads, self.d_k).transpose(1, 2)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic weights, shape ``(n, heads, M, M)``."""
        check_finite(x, "attention input")
        q = self._split(self.w_q(x))
        k = self._split(self.w_k(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        return torch.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        att = self.attention(x)
        v = self._split(self.w_v(x))
        mixed = (att @ v).transpose(1, 2).reshape(x.shape)
        return self.w_out(mixed), att


class EncoderLayer(nn.Module):
    """Pre-norm block: self-attention and a ReLU FFN, each wrapped in a residual."""

    def __init__(self, d_model: int, heads: int, ffn_dim: int = 2048, dropout: float = 0.1):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.w_r = nn.Linear(d_model, ffn_dim)
        self.w_o = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_o(self.dropout(torch.relu(self.w_r(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, _ = self.attn(self.norm1(x))
        x = x + h
        return x + self.ffn(self.norm2(x))


class EncoderArray(nn.Module):
    def __init__(self, d_model: int, heads: int = 4, layers: int = 4, ffn_dim: int = 2048, dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d_model, heads, ffn_dim, dropout) for _ in range(layers))

    def forward(self, seq: EncoderSequence) -> EncoderSequence:
        x = seq.tokens
        for layer in self.layers:
            x = layer(x)
        return seq.replace(x)

    def attention_maps(self, seq: EncoderSequence) -> list[torch.Tensor]:
        maps = []
        x = seq.tokens
        for layer in self.layers:
            maps.append(layer.attn.attention(layer.norm1(x)))
            x = layer(x)
        return maps


class LabelHead(nn.Module):
    """One shared linear map from each label token to its logit."""

    def __init__(self, d_model: int, dropout: float = 0.35):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(d_model, 1)

    def forward(self, seq: EncoderSequence) -> torch.Tensor:
        if seq.n_labels == 0:
            raise ValueError("sequence carries no label tokens")
        x = self.dropout(seq.label_tokens())
        # same map as self.linear, as a reduction whose result does not vary with batch size
        return (x * self.linear.weight[0]).sum(-1) + self.linear.bias[0]


def classify_head(seq: EncoderSequence, head: LabelHead) -> torch.Tensor:
    """Per-label probabilities."""
    return torch.sigmoid(head(seq))
