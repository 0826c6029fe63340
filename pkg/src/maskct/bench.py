"""Frame-stream inference benchmark: FPS and metrics per subset plus an average row."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np
import torch

from maskct.data import prepare_sample
from maskct.labels import LabelState
from maskct.metrics import aggregate, binarize
from maskct.model import MaskCT, to_tensor
from maskct.training import Samples, prefetch

MODES = ("model", "end-to-end")


@dataclass
class BenchRow:
    subset: str
    frames: int
    model_seconds: float
    wall_seconds: float
    metrics: dict[str, Any]

    @property
    def model_fps(self) -> float:
        return self.frames / self.model_seconds

    @property
    def e2e_fps(self) -> float:
        return self.frames / self.wall_seconds


@dataclass
class BenchResult:
    mode: str
    batch_size: int
    rows: list[BenchRow] = field(default_factory=list)
    probs: dict[str, np.ndarray] = field(default_factory=dict)

    def fps(self, row: BenchRow) -> float:
        return row.model_fps if self.mode == "model" else row.e2e_fps

    @property
    def frames(self) -> int:
        return sum(r.frames for r in self.rows)

    @property
    def wall_seconds(self) -> float:
        return sum(r.model_seconds if self.mode == "model" else r.wall_seconds for r in self.rows)

    @property
    def overall_fps(self) -> float:
        """All frames over all timed seconds."""
        return self.frames / self.wall_seconds

    def table(self) -> list[dict[str, Any]]:
        """One row per subset and a final ``Ave.`` row averaging them."""
        out = []
        for r in self.rows:
            out.append({
                "subset": r.subset,
                "frames": r.frames,
                "seconds": r.model_seconds if self.mode == "model" else r.wall_seconds,
                "fps": self.fps(r),
                "model_fps": r.model_fps,
                "e2e_fps": r.e2e_fps,
                **r.metrics,
            })
        if out:
            ave: dict[str, Any] = {"subset": "Ave.", "frames": self.frames}
            for key in ("seconds", "fps", "model_fps", "e2e_fps", "CP", "CR", "CF1", "OP", "OR", "OF1"):
                vals = [row[key] for row in out]
                ave[key] = None if any(v is None for v in vals) else float(np.mean(vals))
            out.append(ave)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "batch_size": self.batch_size,
            "frames": self.frames,
            "overall_fps": self.overall_fps,
            "rows": self.table(),
        }


def _batches(samples: Samples, size: int, batch_size: int) -> Iterator[torch.Tensor]:
    for start in range(0, len(samples), batch_size):
        idx = range(start, min(start + batch_size, len(samples)))
        yield to_tensor([prepare_sample(samples.image(i), "eval", size) for i in idx])


@torch.no_grad()
def stream(
    model: MaskCT, samples: Samples, batch_size: int, prefetch_depth: int = 0
) -> tuple[np.ndarray, float, float]:
    """Probabilities for every frame, seconds inside the model, and loop wall seconds."""
    if len(samples) == 0:
        raise ValueError("empty frame stream")
    model.eval()
    size = model.cfg.image_size
    masked = torch.full((batch_size, model.num_labels), int(LabelState.MASKED))
    logits, model_s = [], 0.0
    start = time.perf_counter()
    for images in prefetch(_batches(samples, size, batch_size), prefetch_depth):
        t0 = time.perf_counter()
        logits.append(model(images, masked[: images.shape[0]]))
        model_s += time.perf_counter() - t0
    # one sigmoid over the whole stream: its vectorised kernel rounds differently by shape
    probs = torch.sigmoid(torch.cat(logits)).numpy()
    wall = time.perf_counter() - start
    return probs, model_s, wall


def run_bench(
    model: MaskCT,
    subsets: dict[str, Samples],
    batch_size: int = 32,
    mode: str = "model",
    threshold: float = 0.5,
    deterministic: bool = True,
    prefetch_depth: int = 2,
    class_names: Sequence[str] = (),
) -> BenchResult:
    """Stream each subset with all labels Masked.

    ``deterministic`` serialises decoding and inference and makes the backbone
    batch-invariant, so predictions do not depend on ``batch_size``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not subsets:
        raise ValueError("empty frame stream")
    result = BenchResult(mode, batch_size)
    previous = model.backbone.batch_invariant
    model.backbone.batch_invariant = deterministic
    try:
        for name, samples in subsets.items():
            probs, model_s, wall = stream(model, samples, batch_size, 0 if deterministic else prefetch_depth)
            report = aggregate(samples.truth, binarize(probs, threshold), threshold, class_names, dataset=name)
            metrics = {k: getattr(report, k) for k in ("CP", "CR", "CF1", "OP", "OR", "OF1")}
            result.rows.append(BenchRow(name, len(samples), model_s, wall, metrics))
            result.probs[name] = probs
    finally:
        model.backbone.batch_invariant = previous
    return result
