"""MASK-CT: backbone tokens, feature discovery and label states through the encoder array."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from maskct.backbone import TokenProjection, load_pretrained_weights
from maskct.config import ModelConfig
from maskct.encoder import EncoderArray, EncoderSequence, FeatureDiscovery, LabelHead
from maskct.labels import LabelState, embed_label_states

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def to_tensor(images: np.ndarray | list[np.ndarray], i_max: float = 255.0) -> torch.Tensor:
    """``(n, H, W, 3)`` intensities to a normalised ``(n, 3, H, W)`` float tensor."""
    x = torch.as_tensor(np.ascontiguousarray(np.stack(images) if isinstance(images, list) else images))
    x = x.to(torch.float32).permute(0, 3, 1, 2) / i_max
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


class MaskCT(nn.Module):
    def __init__(self, cfg: ModelConfig, num_labels: int, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.num_labels = num_labels
        if cfg.pretrained:
            self.backbone = load_pretrained_weights(cfg.pretrained, cfg.arch, cfg.stages, cfg.image_size)
        else:
            self.backbone = load_pretrained_weights(None, cfg.arch, cfg.stages, cfg.image_size, seed=seed)
        if cfg.freeze_backbone:
            self.backbone.freeze()
        d = cfg.d_model
        self.n_tokens = self.backbone.grid**2
        self.projection = TokenProjection(self.backbone.channels, d)
        self.position = nn.Parameter(torch.zeros(1, self.n_tokens, d))
        self.label_table = nn.Parameter(torch.zeros(num_labels, d))
        self.state_table = nn.Parameter(torch.zeros(len(LabelState), d))
        self.fd = FeatureDiscovery(cfg.fd_kernel)
        self.encoder = EncoderArray(d, cfg.heads, cfg.layers, cfg.ffn_dim, cfg.dropout)
        self.norm = nn.LayerNorm(d)
        self.head = LabelHead(d, cfg.dropout_fc)
        for p in (self.position, self.label_table, self.state_table):
            nn.init.normal_(p, 0.0, 0.02)

    def sequence(self, images: torch.Tensor, states: torch.Tensor) -> EncoderSequence:
        fmap = self.backbone.extract_features(images)
        feats = self.projection(fmap).tokens + self.position
        if states.ndim == 1:
            states = states.expand(images.shape[0], -1)
        ls = embed_label_states(states, self.label_table, self.state_table)
        fd = self.fd(feats, ls)
        tokens = torch.cat([feats, fd, ls], dim=1)
        return EncoderSequence(tokens, feats.shape[1], fd.shape[1], ls.shape[1])

    def forward(self, images: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        """Logits ``(n, N)`` for images ``(n, 3, S, S)`` and label states ``(n, N)``."""
        seq = self.encoder(self.sequence(images, states))
        return self.head(seq.replace(self.norm(seq.tokens)))

    @torch.no_grad()
    def predict_proba(self, images: torch.Tensor, states: torch.Tensor | None = None) -> torch.Tensor:
        if states is None:
            states = torch.full((images.shape[0], self.num_labels), int(LabelState.MASKED))
        return torch.sigmoid(self(images, states))
