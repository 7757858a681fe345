"""Paired MNIST-CD / MNIST-CB synthesis and the on-disk paired-image format.

Domain X (MNIST-CD) is a colored digit on black, domain Y (MNIST-CB) is a
white digit on a colored background. Both images of a pair are rendered from
the same grayscale digit, so the digit shape is the shared factor and the two
colors are the domain-exclusive factors.

All images produced here are ``H x W x 3`` float32 arrays in ``[0, 1]``.
The model works in ``[-1, 1]``; use :func:`to_model_range` at the boundary.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

DEFAULT_RESOLUTION = 64
MASK_THRESHOLD = 0.5
PALETTE = "hsv-full"
# Per-channel mean of hsv_to_rgb(h, 1, 1) for h ~ U[0, 1).
PALETTE_CHANNEL_MEAN = (0.5, 0.5, 0.5)

SPLIT_CODES = {"train": 0, "test": 1}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class GrayscaleDigit:
    pixels: np.ndarray
    label: int = -1

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError(f"digit must be a square 2-D grid, got shape {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("digit intensities must lie in [0, 1]")


@dataclass
class PairedSample:
    x: np.ndarray
    y: np.ndarray
    source_label: int
    digit_color: tuple
    background_color: tuple
    # resized grayscale intensities that both images were rendered from
    digit: Optional[np.ndarray] = None


@dataclass
class DatasetSplit:
    samples: list
    split_name: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def images(self, domain: str) -> np.ndarray:
        """Stack one domain into an ``N x H x W x 3`` array."""
        if domain not in ("X", "Y"):
            raise ValueError(f"domain must be 'X' or 'Y', got {domain!r}")
        if not self.samples:
            return np.zeros((0, 0, 0, 3), dtype=np.float32)
        return np.stack([s.x if domain == "X" else s.y for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.source_label for s in self.samples], dtype=np.int64)

    def subset(self, count: int) -> "DatasetSplit":
        return DatasetSplit(self.samples[:count], self.split_name, self.seed, dict(self.meta))


def _check_color(color) -> np.ndarray:
    c = np.asarray(color, dtype=np.float64)
    if c.shape != (3,):
        raise ValueError(f"color must be an RGB triple, got {color!r}")
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise ValueError(f"color components must lie in [0, 1], got {color!r}")
    return c


def resize_intensity(pixels: np.ndarray, resolution: Optional[int]) -> np.ndarray:
    """Bilinear resize of a 2-D intensity grid, clipped back into [0, 1]."""
    p = np.asarray(pixels, dtype=np.float32)
    if resolution is None or p.shape == (resolution, resolution):
        return p.copy()
    img = Image.fromarray(p, mode="F").resize((resolution, resolution), Image.BILINEAR)
    return np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)


def _pixels(digit) -> np.ndarray:
    return digit.pixels if isinstance(digit, GrayscaleDigit) else np.asarray(digit)


def colorize_digit(digit, color, resolution: Optional[int] = DEFAULT_RESOLUTION) -> np.ndarray:
    """Tint the digit strokes with ``color``; the background stays black."""
    c = _check_color(color).astype(np.float32)
    intensity = resize_intensity(_pixels(digit), resolution)
    return intensity[..., None] * c


def colorize_background(digit, color, resolution: Optional[int] = DEFAULT_RESOLUTION) -> np.ndarray:
    """Paint the background with ``color``; the digit strokes stay white."""
    c = _check_color(color).astype(np.float32)
    intensity = resize_intensity(_pixels(digit), resolution)[..., None]
    return intensity + (1.0 - intensity) * c


def sample_palette_color(rng: np.random.Generator) -> tuple:
    """Fully saturated, full-value color with a uniform hue."""
    return tuple(float(v) for v in colorsys.hsv_to_rgb(rng.random(), 1.0, 1.0))


def split_rng(seed: int, split_name: str, worker: int = 0) -> np.random.Generator:
    """Generator scoped to a split (and optionally a loader worker)."""
    code = SPLIT_CODES.get(split_name, sum(split_name.encode()))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(code, worker)))


def digit_mask(image: np.ndarray, domain: str, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Recover the thresholded digit shape from a rendered image.

    For the full-saturation palette the max channel of an X image and the min
    channel of a Y image both equal the digit intensity.
    """
    img = np.asarray(image)
    if domain == "X":
        return img.max(axis=-1) > threshold
    if domain == "Y":
        return img.min(axis=-1) > threshold
    raise ValueError(f"domain must be 'X' or 'Y', got {domain!r}")


def build_split(base_digits: Sequence[GrayscaleDigit], split_name: str, seed: int,
                count: Optional[int] = None,
                resolution: int = DEFAULT_RESOLUTION) -> DatasetSplit:
    """Render ``count`` paired samples from the first ``count`` base digits.

    Digit and background colors are drawn independently for every sample from
    the split-scoped generator, so the same ``(seed, split_name, count)``
    always yields the same bytes.
    """
    if len(base_digits) == 0:
        raise ValueError("base digit set is empty")
    if count is None:
        count = len(base_digits)
    if count < 0 or count > len(base_digits):
        raise ValueError(f"count {count} exceeds the {len(base_digits)} available base digits")
    rng = split_rng(seed, split_name)
    samples = []
    for digit in base_digits[:count]:
        digit_color = sample_palette_color(rng)
        background_color = sample_palette_color(rng)
        intensity = resize_intensity(digit.pixels, resolution)
        samples.append(PairedSample(
            x=colorize_digit(intensity, digit_color, None),
            y=colorize_background(intensity, background_color, None),
            source_label=int(digit.label),
            digit_color=digit_color,
            background_color=background_color,
            digit=intensity,
        ))
    meta = {"palette": PALETTE, "resolution": resolution, "preset": "mnist-cdcb"}
    return DatasetSplit(samples, split_name, seed, meta)


def to_model_range(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float32) * 2.0 - 1.0


def from_model_range(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, dtype=np.float32) + 1.0) / 2.0


# --------------------------------------------------------------------------
# base digits

def _digits_from_arrays(images: np.ndarray, labels: np.ndarray) -> list:
    images = np.asarray(images, dtype=np.float32)
    if images.max() > 1.0:
        images = images / 255.0
    return [GrayscaleDigit(img, int(lab)) for img, lab in zip(images, labels)]


def load_mnist_digits(split_name: str = "train", path: Optional[str] = None) -> list:
    """Grayscale MNIST digits for one split.

    With ``path`` pointing at a Keras-style ``mnist.npz`` (``x_train``,
    ``y_train``, ``x_test``, ``y_test``) the standard 50K/10K splits are
    returned. Without it, the 5,000-digit subset bundled with ``mlxtend`` is
    split per class into 400 train / 100 test digits.
    """
    if split_name not in SPLIT_CODES:
        raise ValueError(f"split must be 'train' or 'test', got {split_name!r}")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"MNIST archive not found: {p}")
        with np.load(p) as data:
            if split_name == "train":
                return _digits_from_arrays(data["x_train"][:50000], data["y_train"][:50000])
            return _digits_from_arrays(data["x_test"], data["y_test"])

    from mlxtend.data import mnist_data

    flat, labels = mnist_data()
    images = flat.reshape(-1, 28, 28)
    chosen = []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        cut = len(idx) * 4 // 5
        chosen.append(idx[:cut] if split_name == "train" else idx[cut:])
    # interleave classes so any prefix of the split stays roughly balanced
    order = np.stack(chosen, axis=1).reshape(-1)
    return _digits_from_arrays(images[order], labels[order])


def mnist_cdcb(split_name: str = "train", seed: int = 0, count: Optional[int] = None,
               resolution: int = DEFAULT_RESOLUTION, path: Optional[str] = None) -> DatasetSplit:
    """Convenience wrapper: load base digits and render a paired split."""
    digits = load_mnist_digits(split_name, path)
    return build_split(digits, split_name, seed, count, resolution)


# --------------------------------------------------------------------------
# on-disk format

def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_split(split: DatasetSplit, directory) -> Path:
    """Write one side-by-side PNG per pair plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(split.samples):
        pair = np.concatenate([_to_uint8(s.x), _to_uint8(s.y)], axis=1)
        Image.fromarray(pair, mode="RGB").save(out / f"{i:06d}.png")
    manifest = {
        "format": "side-by-side",
        "split": split.split_name,
        "seed": split.seed,
        "palette": split.meta.get("palette", PALETTE),
        "preset": split.meta.get("preset"),
        "resolution": split.meta.get("resolution"),
        "count": len(split),
        "labels": [int(s.source_label) for s in split.samples],
        "digit_colors": [list(s.digit_color) for s in split.samples],
        "background_colors": [list(s.background_color) for s in split.samples],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises several unrelated types
        raise OSError(f"cannot read image {path}: {exc}") from exc


def _fit(image: np.ndarray, resolution: Optional[int]) -> np.ndarray:
    if resolution is None or image.shape[:2] == (resolution, resolution):
        return image
    img = Image.fromarray(_to_uint8(image), mode="RGB").resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _image_files(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_paired_directory(path, resolution: Optional[int] = None) -> DatasetSplit:
    """Read paired images from disk, in lexicographic filename order.

    Two layouts are accepted: a flat directory of side-by-side images
    (domain X on the left half, Y on the right), or a directory holding
    exactly two subdirectories (X then Y, by sorted name) with identical
    filenames. A ``manifest.json`` written by :func:`export_split` restores
    labels and colors. Images come back in ``[0, 1]``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    manifest = {}
    if (root / "manifest.json").is_file():
        manifest = json.loads((root / "manifest.json").read_text())

    pairs = []
    files = _image_files(root)
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if files:
        for f in files:
            img = _read_rgb(f)
            if img.shape[1] % 2:
                raise OSError(f"side-by-side image has odd width: {f}")
            half = img.shape[1] // 2
            pairs.append((_fit(img[:, :half], resolution), _fit(img[:, half:], resolution)))
    elif len(subdirs) == 2:
        xs, ys = _image_files(subdirs[0]), _image_files(subdirs[1])
        x_names, y_names = [f.name for f in xs], [f.name for f in ys]
        if x_names != y_names:
            missing = sorted(set(x_names) ^ set(y_names))
            raise OSError(
                f"mismatched pairs between {subdirs[0]} ({len(xs)}) and {subdirs[1]} ({len(ys)}); "
                f"unpaired file: {missing[0] if missing else x_names[0]}")
        for fx, fy in zip(xs, ys):
            pairs.append((_fit(_read_rgb(fx), resolution), _fit(_read_rgb(fy), resolution)))
    elif subdirs:
        raise OSError(f"expected side-by-side images or exactly two subdirectories in {root}")

    labels = manifest.get("labels") or [-1] * len(pairs)
    dcolors = manifest.get("digit_colors") or [None] * len(pairs)
    bcolors = manifest.get("background_colors") or [None] * len(pairs)
    if len(labels) != len(pairs):
        raise OSError(f"manifest in {root} lists {len(labels)} pairs but {len(pairs)} were found")
    samples = []
    for (x, y), lab, dc, bc in zip(pairs, labels, dcolors, bcolors):
        digit = x.max(axis=-1) if manifest.get("preset") == "mnist-cdcb" else None
        samples.append(PairedSample(
            x=x.astype(np.float32), y=y.astype(np.float32), source_label=int(lab),
            digit_color=tuple(dc) if dc else None,
            background_color=tuple(bc) if bc else None,
            digit=digit,
        ))
    meta = {k: manifest[k] for k in ("palette", "preset") if k in manifest}
    meta["resolution"] = samples[0].x.shape[0] if samples else resolution
    return DatasetSplit(samples, manifest.get("split", "train"), int(manifest.get("seed", 0)), meta)
