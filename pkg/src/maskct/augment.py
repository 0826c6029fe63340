"""MASK-I image augmentation.

Images are ``(H, W, 3)`` numpy arrays with intensities in ``[0, i_max]``.
Every pixel-producing operation rounds half-to-even and clamps, and returns
the dtype it was given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PhotometricParams:
    beta: float = 0.0
    threshold: float = 127.5
    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha <= -1:
            raise ValueError(f"alpha must be > -1, got {self.alpha}")


@dataclass(frozen=True)
class PhotometricRanges:
    """Sampling ranges for the photometric subset (uniform, symmetric around identity)."""

    beta: tuple[float, float] = (-64.0, 64.0)
    alpha: tuple[float, float] = (-0.3, 0.3)
    threshold: float | None = None  # None -> i_max / 2

    def sample(self, rng: np.random.Generator, i_max: float = 255.0) -> PhotometricParams:
        beta = float(rng.uniform(*self.beta))
        alpha = float(rng.uniform(*self.alpha))
        t = i_max / 2 if self.threshold is None else self.threshold
        return PhotometricParams(beta=beta, threshold=t, alpha=alpha)


@dataclass(frozen=True)
class MaskConfig:
    size: int = 18
    fill: float = 0.0

    def __post_init__(self):
        if self.size < 2 or self.size % 2:
            raise ValueError(f"scan box size must be even and >= 2, got {self.size}")

    @property
    def stride(self) -> int:
        return self.size // 2

    @property
    def patch(self) -> int:
        return self.size // 2


@dataclass
class FragmentBatch:
    fragments: list[np.ndarray]
    boxes: list[tuple[int, int, int]]  # (top, left, side) in source coordinates
    photometric_subset: list[int] = field(default_factory=list)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.size == 0:
        raise ValueError("empty image")


def _finish(values: np.ndarray, like: np.ndarray, i_max: float) -> np.ndarray:
    out = np.clip(np.rint(values), 0, i_max)
    return out.astype(like.dtype, copy=False)


def adjust_contrast(img: np.ndarray, beta: float, threshold: float, i_max: float = 255.0) -> np.ndarray:
    """Push every channel away from (beta > 0) or towards ``threshold``."""
    _check_image(img)
    if i_max == 0:
        raise ValueError("i_max must be non-zero")
    if not 0 <= threshold <= i_max:
        raise ValueError(f"threshold {threshold} outside [0, {i_max}]")
    if beta == 0:
        return img.copy()
    x = img.astype(np.float64)
    return _finish(x + (x - threshold) * beta / i_max, img, i_max)


def compute_light(img: np.ndarray) -> np.ndarray:
    """Per-pixel HSL lightness ``(max + min) / 2``, in the image's own units."""
    _check_image(img)
    x = img.astype(np.float64)
    return 0.5 * (x.max(axis=2) + x.min(axis=2))


def adjust_light(light: np.ndarray, alpha: float) -> np.ndarray:
    """Scale lightness deviations from the image mean by ``alpha + 1``."""
    if alpha <= -1:
        raise ValueError(f"alpha must be > -1, got {alpha}")
    light = np.asarray(light, dtype=np.float64)
    mean = light.mean()
    # algebraically mean + (light - mean) * (alpha + 1); exact when alpha == 0
    return light * (alpha + 1) - alpha * mean


def rgb_to_hsl(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalised RGB in [0, 1] to hue (in sextants, [0, 6)), saturation, lightness."""
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    light = 0.5 * (mx + mn)
    chroma = mx - mn
    sat = np.zeros_like(light)
    hue = np.zeros_like(light)
    nz = chroma > 0
    low = nz & (light <= 0.5)
    high = nz & (light > 0.5)
    sat[low] = chroma[low] / (mx + mn)[low]
    sat[high] = chroma[high] / (2.0 - (mx + mn))[high]

    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(nz, chroma, 1.0)
    h_r = ((g - b) / safe) % 6.0
    h_g = (b - r) / safe + 2.0
    h_b = (r - g) / safe + 4.0
    hue = np.where(mx == r, h_r, np.where(mx == g, h_g, h_b))
    hue = np.where(nz, hue, 0.0)
    return hue, sat, light


def hsl_to_rgb(hue: np.ndarray, sat: np.ndarray, light: np.ndarray) -> np.ndarray:
    chroma = (1.0 - np.abs(2.0 * light - 1.0)) * sat
    x = chroma * (1.0 - np.abs(hue % 2.0 - 1.0))
    m = light - chroma / 2.0
    sector = np.floor(hue).astype(int) % 6
    zeros = np.zeros_like(chroma)
    table = [
        (chroma, x, zeros),
        (x, chroma, zeros),
        (zeros, chroma, x),
        (zeros, x, chroma),
        (x, zeros, chroma),
        (chroma, zeros, x),
    ]
    out = np.zeros(hue.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = sector == k
        out[sel, 0] = r[sel]
        out[sel, 1] = g[sel]
        out[sel, 2] = b[sel]
    return out + m[..., None]


def saturation_from_light(mx: np.ndarray, mn: np.ndarray, light: np.ndarray) -> np.ndarray:
    """Piecewise HSL saturation, branch chosen by the (adjusted) lightness."""
    total = mx + mn
    chroma = mx - mn
    low = np.divide(chroma, total, out=np.zeros_like(chroma), where=total > 0)
    high = np.divide(chroma, 2.0 - total, out=np.zeros_like(chroma), where=total < 2)
    return np.where(light <= 0.5, low, high)


def blended_saturation(mx: np.ndarray, mn: np.ndarray, light: np.ndarray) -> np.ndarray:
    """Both saturation branches mixed with weights ``light`` and ``1 - light``."""
    total = mx + mn
    chroma = mx - mn
    low = np.divide(chroma, total, out=np.zeros_like(chroma), where=total > 0)
    high = np.divide(chroma, 2.0 - total, out=np.zeros_like(chroma), where=total < 2)
    return low * light + (1.0 - light) * high


def adjust_saturation(
    img: np.ndarray,
    light: np.ndarray,
    i_max: float = 255.0,
    rule: str = "blend",
) -> np.ndarray:
    """Recompose ``img`` in HSL with the adjusted lightness map and a new saturation.

    ``rule="blend"`` mixes both saturation branches by lightness (the MASK-I
    adjustment); ``rule="piecewise"`` picks one branch, which with the
    unadjusted lightness reproduces the input.  Achromatic pixels are returned
    untouched.
    """
    _check_image(img)
    light = np.asarray(light, dtype=np.float64)
    if light.shape != img.shape[:2]:
        raise ValueError(f"light map {light.shape} does not match image {img.shape[:2]}")
    if rule not in ("blend", "piecewise"):
        raise ValueError(f"unknown saturation rule {rule!r}")

    rgb = img.astype(np.float64) / i_max
    l_new = np.clip(light / i_max, 0.0, 1.0)
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    hue, _, _ = rgb_to_hsl(rgb)
    if rule == "blend":
        sat = blended_saturation(mx, mn, l_new)
    else:
        sat = saturation_from_light(mx, mn, l_new)
    sat = np.clip(sat, 0.0, 1.0)

    out = hsl_to_rgb(hue, sat, l_new) * i_max
    gray = mx == mn
    out[gray] = img[gray]
    return _finish(out, img, i_max)


def photometric(img: np.ndarray, params: PhotometricParams, i_max: float = 255.0) -> np.ndarray:
    """Contrast, then lightness, then saturation."""
    contrasted = adjust_contrast(img, params.beta, params.threshold, i_max)
    light = adjust_light(compute_light(contrasted), params.alpha)
    return adjust_saturation(contrasted, light, i_max)


def crop_multiscale(
    img: np.ndarray,
    count: int,
    seed: int | np.random.Generator,
    min_side: int = 1,
    scale: tuple[float, float] = (0.5, 1.0),
    subset_fraction: float = 0.25,
) -> FragmentBatch:
    """Cut ``count`` random square crops; pick ``round(0.25 * count)`` for photometric jitter."""
    _check_image(img)
    if count < 1:
        raise ValueError(f"fragment count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    short = min(h, w)
    if short < min_side:
        raise ValueError(f"image side {short} is smaller than the scan box {min_side}")
    lo = max(min_side, int(np.ceil(scale[0] * short)))
    hi = max(lo, int(np.floor(scale[1] * short)))

    fragments, boxes = [], []
    for _ in range(count):
        side = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        fragments.append(img[top : top + side, left : left + side].copy())
        boxes.append((top, left, side))
    n_sub = round_half_up(subset_fraction * count)
    subset = sorted(int(i) for i in rng.choice(count, size=n_sub, replace=False))
    return FragmentBatch(fragments, boxes, subset)


def find_mask_windows(img: np.ndarray, cfg: MaskConfig) -> list[tuple[int, int]]:
    """Top-left corners of scan windows brighter than the whole image."""
    _check_image(img)
    h, w = img.shape[:2]
    d = cfg.size
    if h < d or w < d:
        raise ValueError(f"image {h}x{w} smaller than scan box {d}")
    x = img.astype(np.float64)
    global_mean = x.mean()
    # summed-area table over the channel-summed plane
    plane = x.sum(axis=2)
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = plane.cumsum(0).cumsum(1)
    hits = []
    for top in range(0, h - d + 1, cfg.stride):
        for left in range(0, w - d + 1, cfg.stride):
            total = sat[top + d, left + d] - sat[top, left + d] - sat[top + d, left] + sat[top, left]
            if total / (3 * d * d) > global_mean:
                hits.append((top, left))
    return hits


def adaptive_mask(img: np.ndarray, cfg: MaskConfig) -> np.ndarray:
    out = img.copy()
    p = cfg.patch
    for top, left in find_mask_windows(img, cfg):
        out[top : top + p, left : left + p] = cfg.fill
    return out


@dataclass
class Mask1Result:
    image: np.ndarray
    batch: FragmentBatch
    adjusted: list[np.ndarray]
    masked: list[np.ndarray]
    params: dict[int, PhotometricParams]
    occluders: list[list[tuple[int, int]]]
    selected: int


def run_mask1(
    img: np.ndarray,
    count: int,
    cfg: MaskConfig,
    seed: int | np.random.Generator,
    ranges: PhotometricRanges = PhotometricRanges(),
    i_max: float = 255.0,
) -> Mask1Result:
    """Full MASK-I pass, keeping every intermediate for inspection."""
    rng = np.random.default_rng(seed)
    batch = crop_multiscale(img, count, rng, min_side=cfg.size)
    adjusted, params = [], {}
    for i, frag in enumerate(batch.fragments):
        if i in batch.photometric_subset:
            params[i] = ranges.sample(rng, i_max)
            frag = photometric(frag, params[i], i_max)
        adjusted.append(frag)
    occluders = [find_mask_windows(f, cfg) for f in adjusted]
    masked = [adaptive_mask(f, cfg) for f in adjusted]
    selected = int(rng.integers(0, count))
    return Mask1Result(masked[selected], batch, adjusted, masked, params, occluders, selected)


def apply_mask1(
    img: np.ndarray,
    count: int,
    cfg: MaskConfig,
    seed: int | np.random.Generator,
    ranges: PhotometricRanges = PhotometricRanges(),
    training: bool = True,
    i_max: float = 255.0,
) -> np.ndarray:
    """One masked weather fragment of ``img``; identity outside training."""
    if not training:
        return img
    return run_mask1(img, count, cfg, seed, ranges, i_max).image
