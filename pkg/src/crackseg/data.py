"""Image/mask loading, preprocessing, splitting, batching and synthetic cracks."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError
from .tensor import Tensor

LUMA = (0.299, 0.587, 0.114)
IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise DataError(f"sample {self.id}: image {self.image.shape} and mask "
                            f"{self.mask.shape} must be equal 2-D shapes")
        for name, arr in (("image", self.image), ("mask", self.mask)):
            if arr.size and (arr.min() < 0 or arr.max() > 1 or not np.isfinite(arr).all()):
                raise DataError(f"sample {self.id}: {name} values outside [0, 1]")


class Dataset:
    """An ordered, immutable collection of samples with unique ids."""

    def __init__(self, samples: Sequence[Sample], split: str = "all"):
        self.samples = tuple(samples)
        self.split = split
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate sample ids in {split} dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack into (N, 1, H, W) image and mask arrays."""
        if not self.samples:
            raise DataError("dataset is empty")
        x = np.stack([s.image for s in self.samples])[:, None]
        y = np.stack([s.mask for s in self.samples])[:, None]
        return x.astype(np.float32), y.astype(np.float32)

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, split={self.split!r})"


# ----------------------------------------------------------------------------
# Loading
# ----------------------------------------------------------------------------

def load_image_grayscale(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG or PGM file as an H x W float32 grid in [0, 1].

    RGB sources use BT.601 luminance weights before scaling by 1/255.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            fmt = img.format
            if fmt not in ("PNG", "PPM"):
                raise DataError(f"{path}: unsupported image format {fmt!r} (PNG or PGM only)")
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            else:
                if mode == "P":
                    img = img.convert("RGBA" if "transparency" in img.info else "RGB")
                elif mode in ("1", "LA"):
                    img = img.convert("L")
                elif mode not in ("L", "RGB", "RGBA"):
                    raise DataError(f"{path}: unsupported pixel mode {mode!r}")
                arr = np.asarray(img, dtype=np.float64)
                if arr.ndim == 3:
                    arr = arr[..., 0] * LUMA[0] + arr[..., 1] * LUMA[1] + arr[..., 2] * LUMA[2]
                arr = arr / 255.0
    except DataError:
        raise
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (no corner alignment).

    Source coordinate for output index ``o`` is ``(o + 0.5) * in / out - 0.5``,
    clamped to the valid range.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataError(f"resize_bilinear expects a 2-D grid, got shape {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = grid.shape
    if h < 2 or w < 2:
        raise DataError(f"source grid must be at least 2x2, got {h}x{w}")

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    rows = grid[r0] * (1 - fr)[:, None] + grid[r1] * fr[:, None]
    out = rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]
    return out.astype(np.float32)


def _preprocess(grid: np.ndarray, size: int | None) -> np.ndarray:
    if size is None or grid.shape == (size, size):
        return grid
    return np.clip(resize_bilinear(grid, size, size), 0.0, 1.0)


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                raise DataError(f"{directory}: stem {p.stem!r} appears more than once")
            found[p.stem] = p
    return found


def load_dataset(image_dir: str | os.PathLike, mask_dir: str | os.PathLike | None = None,
                 size: int | None = 128, split: str = "all") -> Dataset:
    """Load image/mask pairs matched by filename stem, sorted by stem.

    With ``mask_dir`` omitted, ``image_dir`` is a dataset root holding
    ``images/`` and ``masks/``. Masks are resized like images and are not
    thresholded.
    """
    if mask_dir is None:
        root = Path(image_dir)
        image_dir, mask_dir = root / "images", root / "masks"
    images = _stems(Path(image_dir))
    masks = _stems(Path(mask_dir))
    if not images:
        raise DataError(f"{image_dir}: no .png or .pgm images found")
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DataError(f"no mask for image stem(s): {', '.join(missing)}")
    samples = []
    for stem in sorted(images):
        img = _preprocess(load_image_grayscale(images[stem]), size)
        msk = _preprocess(load_image_grayscale(masks[stem]), size)
        samples.append(Sample(img, msk, stem))
    return Dataset(samples, split)


def to_uint8(grid: np.ndarray) -> np.ndarray:
    """Scale [0, 1] values to bytes, rounding half up."""
    return np.floor(np.clip(grid, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_grayscale_png(grid: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(to_uint8(grid), mode="L").save(path, format="PNG")


def save_dataset(ds: Dataset, root: str | os.PathLike) -> Path:
    """Write ``ds`` as 8-bit PNGs under ``root/images`` and ``root/masks``."""
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for s in ds:
            save_grayscale_png(s.image, root / "images" / f"{s.id}.png")
            save_grayscale_png(s.mask, root / "masks" / f"{s.id}.png")
    except OSError as exc:
        raise DataError(f"{root}: cannot write dataset ({exc})") from exc
    return root


# ----------------------------------------------------------------------------
# Splitting and batching
# ----------------------------------------------------------------------------

def split(ds: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle followed by a contiguous train/val/test partition."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-6:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ds)
    if n < 3 and all(r > 0 for r in ratios):
        raise DataError(f"cannot split {n} sample(s) three ways")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    cuts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    names = ("train", "val", "test")
    return tuple(Dataset([ds[int(i)] for i in idx], name) for idx, name in zip(cuts, names))


class Batch(NamedTuple):
    images: Tensor
    masks: Tensor
    ids: list[str]


def batches(ds: Dataset, batch_size: int, seed: int = 0, epoch: int = 0) -> list[Batch]:
    """Shuffle with ``seed ^ epoch`` and cut into batches; the last may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(ds) == 0:
        return []
    order = np.random.default_rng(seed ^ epoch).permutation(len(ds))
    out = []
    for lo in range(0, len(ds), batch_size):
        chunk = [ds[int(i)] for i in order[lo:lo + batch_size]]
        x = np.stack([s.image for s in chunk])[:, None]
        y = np.stack([s.mask for s in chunk])[:, None]
        out.append(Batch(Tensor(x), Tensor(y), [s.id for s in chunk]))
    return out


# ----------------------------------------------------------------------------
# Synthetic cracks
# ----------------------------------------------------------------------------

CRACK_LEVEL = 0.15
BACKGROUND_MEAN = 0.7


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, (max(size // 8, 2) + 1,) * 2)
    smooth = resize_bilinear(coarse, size, size).astype(np.float64)
    grain = rng.uniform(-1.0, 1.0, (size, size))
    return np.clip(BACKGROUND_MEAN + 0.1 * smooth + 0.03 * grain, 0.0, 1.0)


def _segment_distance(py, px, a, b) -> np.ndarray:
    d = b - a
    t = ((py - a[0]) * d[0] + (px - a[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(py - (a[0] + t * d[0]), px - (a[1] + t * d[1]))


def _crack_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    n_vertices = int(rng.integers(3, 7))
    along = np.linspace(-1.0, size, n_vertices)
    across = np.empty(n_vertices)
    across[0] = rng.uniform(0.2, 0.8) * size
    for i in range(1, n_vertices):
        step = rng.normal(0.0, 0.12 * size)
        across[i] = np.clip(across[i - 1] + step, 0.05 * size, 0.95 * size)
    pts = np.stack([along, across], axis=1)
    if rng.random() < 0.5:
        pts = pts[:, ::-1]
    width = int(rng.integers(1, 4))
    py, px = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.full((size, size), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(py, px, a, b))
    return (dist <= width / 2.0).astype(np.float32)


def gen_synthetic(n: int, size: int = 64, seed: int = 0) -> Dataset:
    """Light textured tiles with one dark polyline crack each; masks are exact.

    Sample ``i`` depends only on ``(seed, i)``.
    """
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        background = _background(rng, size)
        mask = _crack_mask(rng, size)
        crack = CRACK_LEVEL + rng.uniform(-0.03, 0.03, (size, size))
        image = np.where(mask > 0, crack, background).astype(np.float32)
        samples.append(Sample(image, mask, f"{i:05d}"))
    return Dataset(samples, "synthetic")
