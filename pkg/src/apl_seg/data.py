"""Samples, labeled/unlabeled splits, disk I/O and the synthetic shape generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SHAPE_KINDS = ("ellipse", "rectangle", "blob")


class ConfigError(ValueError):
    """Invalid configuration or missing inputs; fatal for a run."""


def _readonly(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    """An H×W×3 float image with an optional binary mask.

    ``hidden_mask`` keeps the annotation of an unlabeled sample for auditing;
    training code must only look at ``mask``.
    """

    image: np.ndarray
    mask: np.ndarray | None
    id: str
    hidden_mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H×W×3, got {self.image.shape}")
        for m in (self.mask, self.hidden_mask):
            if m is None:
                continue
            if m.shape != self.image.shape[:2]:
                raise ValueError(f"{self.id}: mask {m.shape} does not match image {self.image.shape[:2]}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{self.id}: mask must be binary")
        _readonly(self.image)
        _readonly(self.mask)
        _readonly(self.hidden_mask)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class SplitConfig:
    labeled_count: int | None = None
    labeled_ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.labeled_count is None) == (self.labeled_ratio is None):
            raise ConfigError("give exactly one of labeled_count / labeled_ratio")
        if self.labeled_count is not None and self.labeled_count < 1:
            raise ConfigError("labeled_count must be positive")
        if self.labeled_ratio is not None and not 0 < self.labeled_ratio <= 1:
            raise ConfigError("labeled_ratio must lie in (0, 1]")

    def count_for(self, n: int) -> int:
        if self.labeled_count is not None:
            return self.labeled_count
        return max(1, int(round(self.labeled_ratio * n)))


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 64
    num_images: int = 500
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    noise_level: float = 0.5
    seed: int = 0
    # contrast between fg and bg mean colors, sampled uniformly in this range
    contrast: tuple[float, float] = (0.25, 0.45)
    # amplitudes of the smooth textures laid over background / foreground
    bg_texture: float = 0.08
    fg_texture: float = 0.04
    # "bright": foreground lighter than background in every channel;
    # "random": arbitrary color direction and sign
    polarity: str = "bright"


def binarize_mask(arr: np.ndarray, max_value: float | None = None) -> np.ndarray:
    """Pixels above half of the format's maximum become 1."""
    arr = np.asarray(arr)
    if max_value is None:
        if arr.dtype == bool:
            max_value = 1
        elif np.issubdtype(arr.dtype, np.integer):
            max_value = np.iinfo(arr.dtype).max
        else:
            max_value = 1.0
    return (arr > 0.5 * max_value).astype(np.uint8)


def _mask_max(img: Image.Image) -> float:
    if img.mode == "1":
        return 1
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        return 65535
    if img.mode == "F":
        return 1.0
    return 255


def _read_mask(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode in ("RGB", "RGBA", "P", "LA"):
        img = img.convert("L")
    return binarize_mask(np.asarray(img), _mask_max(img))


def _resize_image(img: Image.Image, size: int | None) -> np.ndarray:
    img = img.convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _resize_mask(mask: np.ndarray, size: int | None) -> np.ndarray:
    if size is None or mask.shape == (size, size):
        return mask
    out = Image.fromarray(mask * 255).resize((size, size), Image.NEAREST)
    return (np.asarray(out) > 127).astype(np.uint8)


def read_image(path: str | Path, size: int | None = 128) -> np.ndarray:
    """One RGB image as float32 in [0, 1], optionally resized square (bilinear)."""
    img = Image.open(path)
    img.load()
    return _resize_image(img, size)


def load_dataset(
    root: str | Path,
    images_dir: str = "images",
    masks_dir: str = "masks",
    size: int | None = 128,
) -> list[Sample]:
    """Load ``<root>/images/*`` with masks paired by filename stem.

    Images are scaled to [0, 1] and resized to ``size``×``size`` (bilinear);
    masks are binarized at 50% of their format maximum and resized nearest.
    """
    root = Path(root)
    img_dir = root / images_dir
    if not img_dir.is_dir():
        raise ConfigError(f"image directory not found: {img_dir}")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise ConfigError(f"no images in {img_dir}")
    mask_dir = root / masks_dir
    masks = {}
    if mask_dir.is_dir():
        masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() == ".png"}
    stems = {p.stem for p in images}
    for stem in sorted(set(masks) - stems):
        log.warning("mask %s has no matching image; ignored", stem)

    samples = []
    for path in images:
        try:
            img = Image.open(path)
            img.load()
        except OSError as e:
            log.warning("cannot read %s: %s", path, e)
            continue
        mask = None
        if path.stem in masks:
            mask = _read_mask(masks[path.stem])
            if mask.shape != (img.size[1], img.size[0]):
                log.warning("size mismatch for %s: image %s mask %s; sample rejected",
                            path.stem, img.size[::-1], mask.shape)
                continue
            mask = _resize_mask(mask, size)
        samples.append(Sample(_resize_image(img, size), mask, path.stem))
    return sorted(samples, key=lambda s: s.id)


def save_dataset(samples: Iterable[Sample], root: str | Path, include_hidden: bool = True) -> Path:
    """Write samples in the ``images/`` + ``masks/`` layout read by :func:`load_dataset`.

    Images are clipped to [0, 1] and quantized to 8 bits.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.clip(s.image, 0.0, 1.0)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(root / "images" / f"{s.id}.png")
        mask = s.mask if s.mask is not None else (s.hidden_mask if include_hidden else None)
        if mask is not None:
            Image.fromarray(mask.astype(np.uint8) * 255).save(root / "masks" / f"{s.id}.png")
    return root


def make_split(samples: Sequence[Sample], cfg: SplitConfig) -> tuple[list[Sample], list[Sample]]:
    """Uniformly pick the labeled subset under ``cfg.seed``; strip masks from the rest."""
    if any(s.mask is None for s in samples):
        raise ConfigError("make_split needs fully annotated samples")
    n = len(samples)
    k = cfg.count_for(n)
    if k > n:
        raise ConfigError(f"labeled count {k} exceeds dataset size {n}")
    perm = np.random.default_rng(cfg.seed).permutation(n)
    chosen = set(perm[:k].tolist())
    labeled, unlabeled = [], []
    for i, s in enumerate(samples):
        if i in chosen:
            labeled.append(s)
        else:
            unlabeled.append(replace(s, mask=None, hidden_mask=s.mask))
    return labeled, unlabeled


# -- synthetic shapes -------------------------------------------------------

def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    cx, cy = rng.uniform(0.25, 0.75, size=2)
    theta = rng.uniform(0, math.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    if kind == "ellipse":
        a, b = rng.uniform(0.1, 0.4, size=2)
        m = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    elif kind == "rectangle":
        a, b = rng.uniform(0.08, 0.35, size=2)
        m = (np.abs(u) <= a) & (np.abs(v) <= b)
    elif kind == "blob":
        r0 = rng.uniform(0.12, 0.35)
        phi = np.arctan2(v, u)
        r = np.ones_like(phi)
        for k in (2, 3, 4):
            r += rng.uniform(0.0, 0.25) * np.cos(k * phi + rng.uniform(0, 2 * math.pi))
        m = np.hypot(u, v) <= r0 * r
    else:
        raise ConfigError(f"unknown shape kind {kind!r}")
    return m.astype(np.uint8)


def _texture(size: int, amplitude: float, rng: np.random.Generator, waves: int = 3) -> np.ndarray:
    """Smooth per-channel field bounded by ``amplitude`` in absolute value."""
    c = np.arange(size) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    out = np.zeros((size, size, 3))
    for ch in range(3):
        for _ in range(waves):
            fx, fy = rng.uniform(-3, 3, size=2)
            out[..., ch] += np.sin(2 * math.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * math.pi))
    return amplitude * out / waves


def _synthetic_sample(cfg: SyntheticConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    kinds = sorted(cfg.shape_kinds)
    kind = kinds[rng.integers(len(kinds))]
    n = cfg.image_size
    while True:
        mask = _shape_mask(kind, n, rng)
        if 0.05 <= mask.mean() <= 0.60:
            break

    bg = rng.uniform(0.25, 0.75, size=3)
    direction = rng.normal(size=3)
    sign = rng.choice((-1.0, 1.0))
    if cfg.polarity == "bright":
        direction, sign = np.abs(direction), 1.0
    direction /= np.linalg.norm(direction)
    # fg and bg stay separable along `direction` whatever the textures do
    floor = math.sqrt(3) * (cfg.bg_texture + cfg.fg_texture) + 1e-3
    contrast = max(rng.uniform(*cfg.contrast), floor)
    fg = bg + sign * contrast * direction

    m = mask[..., None].astype(bool)
    image = np.where(m, fg + _texture(n, cfg.fg_texture, rng), bg + _texture(n, cfg.bg_texture, rng))
    if cfg.noise_level > 0:
        image = image + rng.normal(scale=cfg.noise_level, size=image.shape)
    return Sample(image.astype(np.float32), mask, f"syn_{cfg.seed}_{index:05d}")


def generate_synthetic(cfg: SyntheticConfig) -> list[Sample]:
    if cfg.image_size < 32:
        raise ConfigError("image_size must be at least 32")
    if not cfg.shape_kinds:
        raise ConfigError("shape_kinds is empty")
    unknown = set(cfg.shape_kinds) - set(SHAPE_KINDS)
    if unknown:
        raise ConfigError(f"unknown shape kinds {sorted(unknown)}")
    if cfg.polarity not in ("bright", "random"):
        raise ConfigError(f"unknown polarity {cfg.polarity!r}")
    if cfg.noise_level < 0:
        raise ConfigError("noise_level must be nonnegative")
    return [_synthetic_sample(cfg, i) for i in range(cfg.num_images)]
