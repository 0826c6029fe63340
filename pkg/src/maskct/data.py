"""Manifests, label binarisation, splits, sample preparation and frame extraction."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from maskct.augment import round_half_up

log = logging.getLogger(__name__)

TRANSIENT_VOCAB = ("sunny", "cloudy", "foggy", "rainy", "snowy", "moist", "other")
SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    pass


@dataclass
class Record:
    path: str
    bits: list[int]
    split: str = "train"
    source: str = ""
    raw: list[float] | None = None
    frame: int | None = None

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class DatasetManifest:
    vocab: tuple[str, ...]
    records: list[Record] = field(default_factory=list)

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        seen = set()
        for r in self.records:
            if r.path in seen:
                raise DataError(f"duplicate manifest path {r.path}")
            seen.add(r.path)
            if len(r.bits) != len(self.vocab):
                raise DataError(f"{r.path}: {len(r.bits)} label bits for {len(self.vocab)} classes")
            if r.split not in SPLITS:
                raise DataError(f"{r.path}: unknown split {r.split!r}")

    def __len__(self) -> int:
        return len(self.records)

    def truth(self) -> np.ndarray:
        return np.array([r.bits for r in self.records], dtype=np.int64).reshape(len(self.records), len(self.vocab))

    def subsets(self) -> dict[str, "DatasetManifest"]:
        """Records grouped by ``source``, in first-appearance order."""
        groups: dict[str, list[Record]] = {}
        for r in self.records:
            groups.setdefault(r.source, []).append(r)
        return {k: DatasetManifest(self.vocab, v) for k, v in groups.items()}

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"vocab": list(self.vocab)})]
        lines += [json.dumps(r.to_json()) for r in self.records]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise DataError(f"empty manifest: {path}")
        header = json.loads(lines[0])
        if "vocab" not in header:
            raise DataError(f"{path}: first line must carry the vocabulary")
        records = [Record(**json.loads(ln)) for ln in lines[1:]]
        return cls(tuple(header["vocab"]), records)

    def resolve(self, root: str | Path) -> "DatasetManifest":
        """Copy with relative image paths anchored at ``root``."""
        root = Path(root)
        recs = []
        for r in self.records:
            p = Path(r.path)
            recs.append(Record(**{**asdict(r), "path": str(p if p.is_absolute() else root / p)}))
        return DatasetManifest(self.vocab, recs)


def binarize_transient(raw: Iterable[float], threshold: float = 0.5) -> list[int]:
    """Attribute intensities to bits: 1 iff intensity >= 0.5."""
    vals = np.asarray(list(raw), dtype=np.float64)
    if np.any((vals < 0) | (vals > 1)) or np.any(np.isnan(vals)):
        raise DataError(f"intensities must lie in [0, 1], got {vals.tolist()}")
    return (vals >= threshold).astype(int).tolist()


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = round_half_up(ratios[0] * n)
    n_val = min(round_half_up(ratios[1] * n), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Shuffle and cut into disjoint train/val/test manifests."""
    if len(manifest) == 0:
        raise DataError("cannot split an empty manifest")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(manifest))
    n_train, n_val, _ = split_counts(len(manifest), ratios)
    cuts = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
    out = []
    for name in SPLITS:
        recs = [Record(**{**asdict(manifest.records[i]), "split": name}) for i in sorted(cuts[name])]
        out.append(DatasetManifest(manifest.vocab, recs))
    return tuple(out)


def decode_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from None


def resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[:2] == (size, size):
        return img
    return np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))


def add_noise(img: np.ndarray, sigma: float, rng: np.random.Generator, i_max: float = 255.0) -> np.ndarray:
    noisy = img.astype(np.float64) + rng.normal(0.0, sigma * i_max, size=img.shape)
    return np.clip(np.rint(noisy), 0, i_max).astype(img.dtype)


def prepare_sample(
    img: np.ndarray,
    mode: str,
    size: int = 384,
    seed: int | np.random.Generator | None = None,
    noise_sigma: float = 0.01,
) -> np.ndarray:
    """Resize; in train mode also add Gaussian noise (sigma as a fraction of 255)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = resize(np.asarray(img, dtype=np.uint8), size)
    if mode == "train" and noise_sigma > 0:
        out = add_noise(out, noise_sigma, np.random.default_rng(seed))
    return out


@dataclass
class Segment:
    start: int  # first frame, inclusive
    end: int  # last frame, exclusive
    labels: list[str]


@dataclass
class VideoClipSpec:
    source: str
    segments: list[Segment]
    fps: float = 30.0
    name: str = ""

    def __post_init__(self):
        self.segments = [s if isinstance(s, Segment) else Segment(**s) for s in self.segments]
        ordered = sorted(self.segments, key=lambda s: s.start)
        for a, b in zip(ordered, ordered[1:]):
            if b.start < a.end:
                raise DataError(f"segments [{a.start}, {a.end}) and [{b.start}, {b.end}) overlap")
        for s in ordered:
            if s.start < 0 or s.end <= s.start:
                raise DataError(f"bad segment range [{s.start}, {s.end})")

    @classmethod
    def read(cls, path: str | Path) -> "VideoClipSpec":
        return cls(**json.loads(Path(path).read_text()))


def _numbered(directory: Path) -> list[Path]:
    frames = sorted(directory.glob("*.png"), key=lambda p: int(re.sub(r"\D", "", p.stem) or -1))
    if not frames:
        raise DataError(f"no PNG frames in {directory}")
    return frames


def _video_frames(source: Path, fps: float, out_dir: Path) -> list[Path]:
    import cv2

    cap = cv2.VideoCapture(str(source))
    if not cap.isOpened():
        raise DataError(f"cannot open video {source}")
    src_fps = cap.get(cv2.CAP_PROP_FPS) or fps
    step = max(src_fps / fps, 1.0)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, i, next_keep = [], 0, 0.0
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        if i >= next_keep - 1e-9:
            p = out_dir / f"{len(paths):06d}.png"
            Image.fromarray(frame[..., ::-1]).save(p, compress_level=1)
            paths.append(p)
            next_keep += step
        i += 1
    cap.release()
    return paths


def extract_frames(
    clip: VideoClipSpec,
    vocab: tuple[str, ...],
    out_dir: str | Path | None = None,
) -> DatasetManifest:
    """One record per frame, labelled by the segment that covers it.

    ``clip.source`` is a video file or a directory of numbered PNG frames
    (already at the clip frame rate). Uncovered frames are logged and dropped.
    """
    src = Path(clip.source)
    name = clip.name or src.stem
    if src.is_dir():
        frames = _numbered(src)
    elif src.exists():
        frames = _video_frames(src, clip.fps, Path(out_dir or src.with_suffix("")))
    else:
        raise DataError(f"clip source not found: {src}")
    for s in clip.segments:
        if s.end > len(frames):
            raise DataError(f"segment [{s.start}, {s.end}) runs past the clip's {len(frames)} frames")
        unknown = set(s.labels) - set(vocab)
        if unknown:
            raise DataError(f"segment labels {sorted(unknown)} not in vocabulary")

    records, dropped = [], []
    for idx, path in enumerate(frames):
        seg = next((s for s in clip.segments if s.start <= idx < s.end), None)
        if seg is None:
            dropped.append(idx)
            continue
        bits = [int(c in seg.labels) for c in vocab]
        records.append(Record(str(path), bits, "test", name, frame=idx))
    if dropped:
        log.warning("%s: %d frames outside every segment excluded (first %d)", name, len(dropped), dropped[0])
    log.info("%s: %d frames extracted", name, len(records))
    return DatasetManifest(vocab, records)


def iter_images(manifest: DatasetManifest) -> Iterator[tuple[Record, np.ndarray]]:
    for r in manifest.records:
        yield r, decode_image(r.path)
