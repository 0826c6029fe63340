"""Weather feature extractor: a residual CNN cut after its first stages."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn
from torchvision.models import resnet18, resnet152

from maskct.checkpoint import load_tensors, tensor_checksum

log = logging.getLogger(__name__)

ARCHS = {"resnet18": resnet18, "resnet152": resnet152}
STAGE_WIDTHS = {
    "resnet18": (64, 128, 256, 512),
    "resnet152": (256, 512, 1024, 2048),
}
# conv1, bn1, relu, maxpool, layer1..layer4
STEM = ("conv1", "bn1", "relu", "maxpool")


def stage_stride(stages: int) -> int:
    return 4 * 2 ** (stages - 1)


def prefix_names(stages: int) -> tuple[str, ...]:
    return STEM + tuple(f"layer{i}" for i in range(1, stages + 1))


@dataclass
class FeatureMap:
    values: torch.Tensor  # (n, h', w', k)
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def origins(self) -> list[tuple[int, int, int, int]]:
        """Source rectangle ``(top, left, height, width)`` of each cell, row-major."""
        h, w = self.grid
        s = self.stride
        return [(r * s, c * s, s, s) for r in range(h) for c in range(w)]


@dataclass
class FeatureSequence:
    tokens: torch.Tensor  # (n, h'*w', d)
    positions: list[tuple[int, int, int, int]]


class WeatherFeatureExtractor(nn.Module):
    """Stem plus the first ``stages`` residual stages of a torchvision ResNet.

    ``stages=2`` keeps six top-level blocks (conv1, bn1, relu, maxpool,
    layer1, layer2) for an output stride of 8.
    """

    def __init__(self, arch: str = "resnet18", stages: int = 2, image_size: int = 384):
        super().__init__()
        if arch not in ARCHS:
            raise ValueError(f"unknown backbone {arch!r}; choose from {sorted(ARCHS)}")
        if not 1 <= stages <= 4:
            raise ValueError(f"stages must be in 1..4, got {stages}")
        self.arch = arch
        self.stages = stages
        self.image_size = image_size
        self.stride = stage_stride(stages)
        if image_size % self.stride:
            raise ValueError(f"image size {image_size} not divisible by stride {self.stride}")
        self.channels = STAGE_WIDTHS[arch][stages - 1]
        full = ARCHS[arch](weights=None)
        self.body = nn.Sequential(*(getattr(full, n) for n in prefix_names(stages)))
        self.names = prefix_names(stages)
        # CPU conv kernels block over the batch, so results depend on batch size;
        # one-sample-at-a-time makes outputs independent of batching
        self.batch_invariant = False

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if self.batch_invariant and images.shape[0] > 1:
            return torch.cat([self.body(images[i : i + 1]) for i in range(images.shape[0])])
        return self.body(images)

    def extract_features(self, images: torch.Tensor) -> FeatureMap:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (n, 3, S, S) input, got {tuple(images.shape)}")
        s = self.image_size
        if images.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} input, got {tuple(images.shape[-2:])}")
        out = self(images)
        return FeatureMap(out.permute(0, 2, 3, 1), self.stride)

    def torchvision_state_dict(self) -> dict[str, torch.Tensor]:
        """State dict keyed with torchvision ResNet names (``layer1.0.conv1.weight``...)."""
        sd = self.body.state_dict()
        out = {}
        for key, value in sd.items():
            idx, rest = key.split(".", 1)
            out[f"{self.names[int(idx)]}.{rest}"] = value
        return out

    def load_torchvision_state_dict(self, sd: dict[str, torch.Tensor]) -> str:
        """Copy the truncated prefix out of a (possibly full) ResNet state dict.

        Keys beyond the prefix (later stages, ``fc``) are ignored. Returns a
        sha256 checksum of the loaded parameters.
        """
        own = self.torchvision_state_dict()
        for name, ref in own.items():
            if name not in sd:
                raise KeyError(f"checkpoint is missing backbone layer {name}")
            if tuple(sd[name].shape) != tuple(ref.shape):
                raise ValueError(
                    f"shape mismatch at {name}: checkpoint {tuple(sd[name].shape)}, "
                    f"model {tuple(ref.shape)}"
                )
        remapped = {}
        for key in self.body.state_dict():
            idx, rest = key.split(".", 1)
            remapped[key] = sd[f"{self.names[int(idx)]}.{rest}"]
        self.body.load_state_dict(remapped)
        checksum = tensor_checksum(self.torchvision_state_dict())
        log.info("loaded %s prefix (%d stages), checksum %s", self.arch, self.stages, checksum)
        return checksum

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)


def load_pretrained_weights(
    source: str | None,
    arch: str = "resnet18",
    stages: int = 2,
    image_size: int = 384,
    seed: int | None = None,
) -> WeatherFeatureExtractor:
    """Backbone with weights from ``source``, or seeded random init when ``source`` is None."""
    if source is None:
        if seed is None:
            raise ValueError("no checkpoint given and no seed for random initialisation")
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return WeatherFeatureExtractor(arch, stages, image_size)
    tensors, _ = load_tensors(source)
    model = WeatherFeatureExtractor(arch, stages, image_size)
    model.load_torchvision_state_dict(tensors)
    return model


class TokenProjection(nn.Module):
    """Row-major flatten of a feature map followed by a linear map to model width."""

    def __init__(self, channels: int, d_model: int):
        super().__init__()
        self.proj = nn.Linear(channels, d_model)

    def forward(self, fmap: FeatureMap) -> FeatureSequence:
        n, h, w, k = fmap.values.shape
        tokens = self.proj(fmap.values.reshape(n, h * w, k))
        return FeatureSequence(tokens, fmap.origins())


def flatten_embed(fmap: FeatureMap, projection: TokenProjection) -> FeatureSequence:
    return projection(fmap)
