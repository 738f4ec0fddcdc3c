"""Dataset indexing, image decoding, normalization and augmentation."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("training", "validation", "evaluation")
FOOD11_CLASSES = (
    "Bread", "Dairy product", "Dessert", "Egg", "Fried food", "Meat",
    "Noodles-Pasta", "Rice", "Seafood", "Soup", "Vegetable-Fruit",
)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".pnm"}


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    root: Path
    split: str
    entries: list[tuple[Path, int]]
    class_names: list[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.entries], dtype=np.int64)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()

    @classmethod
    def synthetic(cls, n: int, num_classes: int = 11) -> DatasetIndex:
        """An in-memory index of ``n`` placeholder entries (batch accounting only)."""
        entries = [(Path(f"synthetic/{i:06d}.ppm"), i % num_classes) for i in range(n)]
        return cls(Path("synthetic"), "training", entries, [f"class{k}" for k in range(num_classes)])


def index_dataset(root, split: str, class_names: Sequence[str] | None = None) -> DatasetIndex:
    """Index ``<root>/<split>/<class>/<file>``, sorted by path.

    Class ids follow ``class_names`` if given, else the sorted class
    directory names. Files that cannot be opened are skipped and counted.
    """
    root = Path(root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing split directory: {split_dir}")
    found = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    names = list(class_names) if class_names is not None else found
    if not names:
        raise DatasetError(f"no class directories under {split_dir}")
    for name in names:
        if not (split_dir / name).is_dir():
            raise DatasetError(f"missing class directory: {split_dir / name}")
    entries, skipped = [], 0
    for cid, name in enumerate(names):
        for path in sorted((split_dir / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if not os.access(path, os.R_OK) or path.stat().st_size == 0:
                skipped += 1
                continue
            entries.append((path, cid))
    if skipped:
        log.warning("skipped %d unreadable files under %s", skipped, split_dir)
    return DatasetIndex(root, split, entries, names, skipped)


# -- images -------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (C, H, W) float image with half-pixel-centred bilinear sampling."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(img.dtype)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def load_image(path, size: int) -> np.ndarray:
    """Decode PNG/JPEG/PPM to a (3, size, size) float32 array in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "LA", "I", "I;16", "F", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float32)[..., None].repeat(3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None
    img = arr.transpose(2, 0, 1) / 255.0
    return resize_bilinear(img, size, size).astype(np.float32)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] array as binary PPM (P6)."""
    arr = np.clip(np.rint(np.asarray(img).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Write a (H, W) [0, 1] array as binary PGM (P5)."""
    arr = np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


# -- normalization ------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization needs 3 means and 3 stds")
        if min(self.std) <= 0:
            raise ValueError("normalization std must be positive")


IMAGENET = NormalizationStats()


def normalize(t: np.ndarray, stats: NormalizationStats = IMAGENET) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=t.dtype)
    std = np.asarray(stats.std, dtype=t.dtype)
    shape = (3, 1, 1) if t.ndim == 3 else (1, 3, 1, 1)
    return (t - mean.reshape(shape)) / std.reshape(shape)


def denormalize(t: np.ndarray, stats: NormalizationStats = IMAGENET) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=t.dtype)
    std = np.asarray(stats.std, dtype=t.dtype)
    shape = (3, 1, 1) if t.ndim == 3 else (1, 3, 1, 1)
    return t * std.reshape(shape) + mean.reshape(shape)


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_degrees: float = 15.0
    hflip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    erase_prob: float = 0.25
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    erase_fill: str = "mean"

    def __post_init__(self):
        for name in ("hflip_prob", "erase_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("erase_area must satisfy 0 < lo <= hi < 1")
        alo, ahi = self.erase_aspect
        if not 0.0 < alo <= ahi:
            raise ValueError("erase_aspect must satisfy 0 < lo <= hi")
        if not math.isfinite(self.rotation_degrees) or self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be finite and non-negative")
        if self.erase_fill not in ("mean", "zero", "random"):
            raise ValueError("erase_fill must be 'mean', 'zero' or 'random'")

    @classmethod
    def identity(cls) -> AugmentationPolicy:
        return cls(rotation_degrees=0.0, hflip_prob=0.0, brightness=0.0, contrast=0.0,
                   saturation=0.0, erase_prob=0.0)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream keyed by (seed, epoch, index)."""
    return np.random.default_rng([seed, epoch, index])


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre, bilinear sampling, zero fill outside."""
    if degrees == 0:
        return img.copy()
    from scipy import ndimage

    return ndimage.rotate(img, degrees, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def color_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Apply multiplicative factors (1 + delta) in brightness, contrast, saturation order."""
    out = img * (1.0 + brightness)
    out = np.clip(out, 0.0, 1.0)
    m = _gray(out).mean()
    out = np.clip((out - m) * (1.0 + contrast) + m, 0.0, 1.0)
    g = _gray(out)[None]
    out = np.clip((out - g) * (1.0 + saturation) + g, 0.0, 1.0)
    return out.astype(img.dtype)


def sample_erase_box(rng: np.random.Generator, h: int, w: int, policy: AugmentationPolicy,
                     attempts: int = 10) -> tuple[int, int, int, int] | None:
    """Draw (top, left, height, width) whose area fraction lies in ``erase_area``."""
    lo, hi = policy.erase_area
    for _ in range(attempts):
        area = rng.uniform(lo, hi) * h * w
        aspect = rng.uniform(*policy.erase_aspect)
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if not (0 < eh <= h and 0 < ew <= w):
            continue
        if not lo <= eh * ew / (h * w) <= hi:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        return top, left, eh, ew
    return None


def augment(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator,
            stats: NormalizationStats = IMAGENET) -> np.ndarray:
    """rotate -> hflip -> colour jitter -> random erase, each sampled independently.

    Every draw is consumed whether or not the transform fires, so a sample's
    stream position never depends on earlier outcomes.
    """
    c, h, w = img.shape
    angle = rng.uniform(-policy.rotation_degrees, policy.rotation_degrees)
    flip = rng.random() < policy.hflip_prob
    jitter = [rng.uniform(-d, d) for d in (policy.brightness, policy.contrast, policy.saturation)]
    erase = rng.random() < policy.erase_prob

    out = rotate(img, angle) if angle else img.copy()
    if flip:
        out = hflip(out)
    if any(jitter):
        out = color_jitter(out, *jitter)
    if erase:
        box = sample_erase_box(rng, h, w, policy)
        if box is not None:
            top, left, eh, ew = box
            if policy.erase_fill == "mean":
                fill = np.asarray(stats.mean, dtype=out.dtype)[:, None, None]
            elif policy.erase_fill == "zero":
                fill = np.zeros((3, 1, 1), dtype=out.dtype)
            else:
                fill = rng.random((3, eh, ew)).astype(out.dtype)
            out[:, top : top + eh, left : left + ew] = fill
    return np.clip(out, 0.0, 1.0)


# -- batching -----------------------------------------------------------------


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ATTNCONV_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class BatchLoader:
    """Iterable of (images (N, 3, R, R) float32, labels (N,) int64) batches.

    With ``shuffle`` the order is a permutation seeded by (seed, epoch); the
    final partial batch is kept. Augmentation of sample ``i`` is seeded by
    (seed, epoch, i), so results do not depend on batch composition or on
    the prefetch worker count.
    """

    index: DatasetIndex
    batch_size: int
    size: int = 256
    shuffle: bool = False
    seed: int = 0
    epoch: int = 0
    policy: AugmentationPolicy | None = None
    stats: NormalizationStats = IMAGENET
    cache: dict = field(default_factory=dict)
    workers: int = field(default_factory=worker_count)

    def __post_init__(self):
        if self.batch_size < 1:
            raise DatasetError("batch_size must be >= 1")
        if len(self.index) == 0:
            raise DatasetError("cannot batch an empty index")

    def __len__(self) -> int:
        return math.ceil(len(self.index) / self.batch_size)

    def order(self) -> np.ndarray:
        n = len(self.index)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, self.epoch]).permutation(n)

    def plan(self) -> list[np.ndarray]:
        order = self.order()
        return [order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size)]

    def _raw(self, i: int) -> np.ndarray:
        img = self.cache.get(i)
        if img is None:
            img = load_image(self.index.entries[i][0], self.size)
            self.cache[i] = img
        return img

    def sample(self, i: int) -> np.ndarray:
        img = self._raw(int(i))
        if self.policy is not None:
            img = augment(img, self.policy, sample_rng(self.seed, self.epoch, int(i)), self.stats)
        return normalize(img, self.stats)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        labels = self.index.labels
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                for idx in self.plan():
                    yield np.stack(list(pool.map(self.sample, idx))), labels[idx]
        else:
            for idx in self.plan():
                yield np.stack([self.sample(i) for i in idx]), labels[idx]


def batches(index: DatasetIndex, batch_size: int, shuffle: bool = False, seed: int = 0, **kwargs) -> BatchLoader:
    return BatchLoader(index, batch_size, shuffle=shuffle, seed=seed, **kwargs)
