"""Synthetic images with one planted visual cue per class, for overfit and benchmark runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from maskct.config import AugmentConfig, ModelConfig, RunConfig, TrainConfig
from maskct.data import DatasetManifest, Record

CUE_NAMES = ("hstripes", "vstripes", "red", "blue", "speckle")
WEATHER5 = ("sunny", "cloudy", "foggy", "rainy", "snowy")


def _cue(k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    layer = np.zeros((size, size, 3))
    if k == 0:
        layer += 60.0 * ((yy // 4) % 2)[..., None]
    elif k == 1:
        layer += 60.0 * ((xx // 4) % 2)[..., None]
    elif k == 2:
        layer[..., 0] += 70.0
    elif k == 3:
        layer[..., 2] += 70.0
    elif k == 4:
        dots = rng.random((size, size)) < 0.08
        layer += 90.0 * dots[..., None]
    else:
        # extra classes: diagonal stripes of growing period
        period = 3 + k
        layer += 50.0 * (((xx + yy) // period) % 2)[..., None]
    return layer


def planted_image(bits, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.full((size, size, 3), 90.0) + rng.normal(0, 4, size=(size, size, 3))
    for k, b in enumerate(bits):
        if b:
            img += _cue(k, size, rng)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def planted_dataset(
    count: int, classes: int = 5, size: int = 64, seed: int = 0
) -> tuple[list[np.ndarray], np.ndarray]:
    """``count`` images whose label bits are drawn at p=0.5, each class present at least once."""
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, size=(count, classes))
    for k in range(classes):
        if count > k and not truth[:, k].any():
            truth[k, k] = 1
    images = [planted_image(t, size, rng) for t in truth]
    return images, truth


def write_planted(
    out_dir: str | Path,
    count: int,
    vocab: tuple[str, ...],
    size: int = 64,
    seed: int = 0,
    split: str = "train",
    source: str = "",
) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, truth = planted_dataset(count, len(vocab), size, seed)
    records = []
    for i, (img, bits) in enumerate(zip(images, truth)):
        path = out_dir / f"{source or 'img'}_{i:05d}.png"
        Image.fromarray(img).save(path)
        records.append(Record(str(path), [int(b) for b in bits], split, source))
    return DatasetManifest(vocab, records)


def tiny_config(epochs: int = 200, mask1: bool = False, mask_ratio: float = 0.75, seed: int = 0) -> RunConfig:
    """Overfit setup: small backbone and encoder, MASK-II on, MASK-I off so clean images can be memorised."""
    return RunConfig(
        model=ModelConfig(image_size=64, d_model=64, heads=4, layers=4, ffn_dim=256, dropout=0.1, dropout_fc=0.35),
        augment=AugmentConfig(mask1=mask1, fragments=4, box=18),
        train=TrainConfig(lr_init=3e-4, batch_size=32, mask_ratio=mask_ratio, max_epochs=epochs,
                          plateau_patience=50, plateau_factor=0.5),
        seed=seed,
    )
