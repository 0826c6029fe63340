"""MASK-II: label-state sampling and label-state embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
import torch

from maskct.augment import round_half_up


class LabelState(IntEnum):
    MASKED = 0
    KNOWN_POSITIVE = 1
    KNOWN_NEGATIVE = 2


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ValueError("vocabulary is empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate class names in {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def read(cls, path: str | Path) -> "LabelVocabulary":
        lines = Path(path).read_text().splitlines()
        return cls(tuple(s.strip() for s in lines if s.strip()))

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{n}\n" for n in self.names))


@dataclass
class LabelStateVector:
    truth: np.ndarray  # (N,) of {0, 1}
    state: np.ndarray  # (N,) of LabelState values

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.int64)
        self.state = np.asarray(self.state, dtype=np.int64)
        if self.truth.shape != self.state.shape:
            raise ValueError("truth and state lengths differ")
        pos = self.state == LabelState.KNOWN_POSITIVE
        neg = self.state == LabelState.KNOWN_NEGATIVE
        if np.any(self.truth[pos] != 1) or np.any(self.truth[neg] != 0):
            raise ValueError("known state disagrees with truth")

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.state == LabelState.MASKED)


def known_states(truth: np.ndarray) -> np.ndarray:
    truth = np.asarray(truth)
    return np.where(truth == 1, LabelState.KNOWN_POSITIVE, LabelState.KNOWN_NEGATIVE).astype(np.int64)


def sample_mask(truth, mask_ratio: float, seed: int | np.random.Generator) -> LabelStateVector:
    """Mask ``round(mask_ratio * N)`` classes chosen uniformly; the rest become Known.

    The choice of masked classes consumes randomness independently of ``truth``,
    so two truth vectors sampled with the same seed get the same masked set.
    """
    if not 0 <= mask_ratio <= 1:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    truth = np.asarray(truth, dtype=np.int64)
    n = truth.shape[0]
    rng = np.random.default_rng(seed)
    k = round_half_up(mask_ratio * n)
    chosen = rng.permutation(n)[:k]
    state = known_states(truth)
    state[chosen] = LabelState.MASKED
    return LabelStateVector(truth, state)


def all_masked(truth) -> LabelStateVector:
    truth = np.asarray(truth, dtype=np.int64)
    return LabelStateVector(truth, np.full(truth.shape, LabelState.MASKED, dtype=np.int64))


def pinned(truth, evidence: dict[int, int]) -> LabelStateVector:
    """All Masked except the classes in ``evidence`` (index -> 0/1), which are Known."""
    lsv = all_masked(truth)
    truth = lsv.truth.copy()
    for i, v in evidence.items():
        truth[i] = v
        lsv.state[i] = LabelState.KNOWN_POSITIVE if v else LabelState.KNOWN_NEGATIVE
    return LabelStateVector(truth, lsv.state)


def embed_label_states(
    states: torch.Tensor, label_table: torch.Tensor, state_table: torch.Tensor
) -> torch.Tensor:
    """``label_table[i] + state_table[states[..., i]]`` for every class ``i``.

    ``states`` is ``(N,)`` or ``(batch, N)``; the result gains a trailing model
    width. Truth values never enter, only states.
    """
    n, d = label_table.shape
    if state_table.shape != (len(LabelState), d):
        raise ValueError(f"state table must be {(len(LabelState), d)}, got {tuple(state_table.shape)}")
    if states.shape[-1] != n:
        raise ValueError(f"expected {n} label states, got {states.shape[-1]}")
    return label_table + state_table[states]
