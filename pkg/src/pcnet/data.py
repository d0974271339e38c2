"""Datasets: class-per-folder image trees, procedural textures, augmentation, splits."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from pcnet.ops import ConfigurationError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".bmp")


class DatasetError(ValueError):
    """A dataset tree or split request is malformed."""


@dataclass
class Dataset:
    """In-memory images ``[N, 3, H, W]`` with dense integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    sources: list[str]
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_size(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    @property
    def items(self) -> list[tuple[str, int]]:
        return list(zip(self.sources, (int(y) for y in self.labels)))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return replace(self, images=self.images[index], labels=self.labels[index],
                       sources=[self.sources[i] for i in index])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        h.update("\n".join(self.class_names).encode("utf-8"))
        return h.hexdigest()


def _decode(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_folder_dataset(root, input_size=(64, 64)) -> Dataset:
    """Read ``root/<class>/<image>`` trees; classes and files in lexicographic order.

    Pixels are scaled to [0, 1]; per-channel standardisation happens later via
    :func:`standardize` so statistics come from the train split.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class folders")
    images, labels, sources = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class folder {cdir} contains no images")
        for path in files:
            images.append(_decode(path, input_size))
            labels.append(label)
            sources.append(str(path))
    return Dataset(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64),
                   [p.name for p in class_dirs], sources)


# ---------------------------------------------------------------- synthetic

SYNTH_CLASSES = (
    "fine_stripes", "coarse_stripes", "dense_dots", "sparse_dots",
    "checker", "grid", "rings", "blobs",
    "spokes", "crosshatch", "speckle", "wavy",
    "rectangles", "disc", "gradient", "spiral",
)


def _rotated(xx, yy, theta):
    return xx * np.cos(theta) + yy * np.sin(theta), -xx * np.sin(theta) + yy * np.cos(theta)


def _dots(rng, xx, yy, count, radius):
    H, W = xx.shape
    p = np.zeros_like(xx)
    for cx, cy in zip(rng.uniform(0, W, count), rng.uniform(0, H, count)):
        p = np.maximum(p, np.clip(radius + 0.5 - np.hypot(xx - cx, yy - cy), 0, 1))
    return p


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    n -= n.min()
    return n / max(n.max(), 1e-12)


def _pattern(name: str, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    u, v = _rotated(xx, yy, theta)
    cx, cy = rng.uniform(0.3 * W, 0.7 * W), rng.uniform(0.3 * H, 0.7 * H)
    r = np.hypot(xx - cx, yy - cy)
    if name == "fine_stripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * u / rng.uniform(4.5, 6.0) + phase)
    if name == "coarse_stripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * u / rng.uniform(10.0, 14.0) + phase)
    if name == "dense_dots":
        return _dots(rng, xx, yy, rng.integers(55, 75), rng.uniform(1.5, 2.5))
    if name == "sparse_dots":
        return _dots(rng, xx, yy, rng.integers(8, 16), rng.uniform(1.5, 2.5))
    if name == "checker":
        T = rng.uniform(12, 16)
        return (np.sign(np.sin(2 * np.pi * u / T + phase) * np.sin(2 * np.pi * v / T + phase)) + 1) / 2
    if name == "grid":
        T = rng.uniform(12, 16)
        lines = np.maximum(np.abs(np.sin(np.pi * u / T + phase)), np.abs(np.sin(np.pi * v / T + phase)))
        return (lines > 0.93).astype(np.float64)
    if name == "rings":
        return 0.5 + 0.5 * np.sin(2 * np.pi * r / rng.uniform(7, 10) + phase)
    if name == "blobs":
        return _smooth_noise(rng, (H, W), rng.uniform(3.5, 5.0))
    if name == "spokes":
        return 0.5 + 0.5 * np.sin(rng.integers(6, 10) * np.arctan2(yy - cy, xx - cx) + phase)
    if name == "crosshatch":
        T = rng.uniform(7, 9)
        return np.maximum(np.sin(2 * np.pi * u / T + phase), np.sin(2 * np.pi * v / T)) * 0.5 + 0.5
    if name == "speckle":
        return _smooth_noise(rng, (H, W), 0.8)
    if name == "wavy":
        warp = 3.0 * np.sin(2 * np.pi * v / rng.uniform(16, 24))
        return 0.5 + 0.5 * np.sin(2 * np.pi * (u + warp) / rng.uniform(7, 9) + phase)
    if name == "rectangles":
        p = np.zeros((H, W))
        for _ in range(rng.integers(5, 9)):
            w, h = rng.integers(W // 8, W // 3), rng.integers(H // 8, H // 3)
            x0, y0 = rng.integers(0, W - w), rng.integers(0, H - h)
            p[y0:y0 + h, x0:x0 + w] = rng.uniform(0.6, 1.0)
        return p
    if name == "disc":
        return np.clip(rng.uniform(0.2, 0.3) * min(H, W) - r, 0, 1)
    if name == "gradient":
        return np.clip((u - u.min()) / max(np.ptp(u), 1e-12), 0, 1)
    if name == "spiral":
        ang = np.arctan2(yy - cy, xx - cx)
        return 0.5 + 0.5 * np.sin(3 * ang + 2 * np.pi * r / rng.uniform(8, 12) + phase)
    raise ConfigurationError(f"unknown synthetic class {name!r}")


def _render(name: str, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    p = _pattern(name, rng, H, W)
    bg = rng.uniform(0.05, 0.45, size=3)
    fg = rng.uniform(0.55, 0.95, size=3)
    img = bg[:, None, None] * (1 - p) + fg[:, None, None] * p
    img = img * rng.uniform(0.85, 1.15) + rng.normal(0, 0.04, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def generate_synthetic(num_classes: int = 8, per_class: int = 150, size=(64, 64), seed: int = 0) -> Dataset:
    """Procedural texture scenes with confusable neighbouring classes.

    Classes come in look-alike pairs (fine vs coarse stripes, dense vs sparse
    dots, checkerboard vs grid, ...) and vary in orientation, phase, colour,
    brightness and noise within a class.
    """
    if not 4 <= num_classes <= len(SYNTH_CLASSES):
        raise ConfigurationError(f"num_classes must be in [4, {len(SYNTH_CLASSES)}], got {num_classes}")
    if per_class < 1:
        raise ConfigurationError("per_class must be positive")
    if isinstance(size, int):
        size = (size, size)
    H, W = size
    ss = np.random.SeedSequence(seed)
    class_seeds = ss.spawn(num_classes)
    images, labels, sources = [], [], []
    for c in range(num_classes):
        rng = np.random.default_rng(class_seeds[c])
        name = SYNTH_CLASSES[c]
        for i in range(per_class):
            images.append(_render(name, rng, H, W))
            labels.append(c)
            sources.append(f"synth:{name}/{i:05d}")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), list(SYNTH_CLASSES[:num_classes]), sources)


def class_mean_separation(ds: Dataset) -> float:
    """Smallest L2 distance between per-class mean images."""
    means = np.stack([ds.images[ds.labels == c].astype(np.float64).mean(axis=0) for c in range(ds.num_classes)])
    flat = means.reshape(len(means), -1)
    d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
    return float(d[~np.eye(len(d), dtype=bool)].min())


def write_tree(ds: Dataset, root) -> list[Path]:
    """Write images as 8-bit PNG under ``root/<class_name>/``."""
    root = Path(root)
    paths = []
    counters: dict[int, int] = {}
    for img, y in zip(ds.images, ds.labels):
        y = int(y)
        i = counters.get(y, 0)
        counters[y] = i + 1
        cdir = root / ds.class_names[y]
        cdir.mkdir(parents=True, exist_ok=True)
        path = cdir / f"{i:05d}.png"
        arr = np.clip(np.rint(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(path)
        paths.append(path)
    return paths


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentationPolicy:
    rotate_max_deg: float = 30.0
    hflip: bool = True
    vflip: bool = True
    rotate_mode: str = "uniform"  # "uniform" in [-max, max]; "fixed" is +/-max by coin flip

    def __post_init__(self):
        if self.rotate_mode not in ("uniform", "fixed"):
            raise ConfigurationError(f"rotate_mode must be 'uniform' or 'fixed', got {self.rotate_mode!r}")


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Rotate (bilinear, reflect-padded) then flip a ``[3, H, W]`` image.

    Every call draws the same number of variates regardless of outcome so the
    stream stays aligned across images.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"augment expects a [3,H,W] image, got {image.shape}")
    u, flip_h, flip_v = rng.random(3)
    if policy.rotate_mode == "uniform":
        angle = (2 * u - 1) * policy.rotate_max_deg
    else:
        angle = policy.rotate_max_deg if u < 0.5 else -policy.rotate_max_deg
    out = image
    if angle != 0:
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="reflect").astype(image.dtype)
    if policy.hflip and flip_h < 0.5:
        out = out[:, :, ::-1]
    if policy.vflip and flip_v < 0.5:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


# -------------------------------------------------------------- split / norm

def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified partition; each class contributes ``round(fraction * n_c)`` training items."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        n_train = int(round(train_fraction * len(members)))
        if n_train == 0 or n_train == len(members):
            raise DatasetError(
                f"class {ds.class_names[c]!r} ({len(members)} items) would get {n_train} train and "
                f"{len(members) - n_train} test items")
        perm = rng.permutation(members)
        train_idx.append(np.sort(perm[:n_train]))
        test_idx.append(np.sort(perm[n_train:]))
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def standardize(ds: Dataset, mean, std) -> Dataset:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.maximum(np.asarray(std, dtype=np.float64), 1e-12)
    x = (ds.images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=x.astype(ds.images.dtype), mean=mean, std=std)


def prepare_splits(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split, then standardise both halves with statistics of the train half."""
    train, test = split(ds, train_fraction, seed)
    mean, std = channel_stats(train)
    return standardize(train, mean, std), standardize(test, mean, std)


def write_split_manifest(train: Dataset, test: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for name, part in (("train", train), ("test", test)):
            for src, y in part.items:
                w.writerow([src, y, name])


def resolve_dataset(spec: str, input_size: int, synth_classes: int = 8, synth_per_class: int = 150,
                    seed: int = 0) -> Dataset:
    """``"synth"`` generates the procedural set; anything else is a folder tree path."""
    if spec == "synth":
        return generate_synthetic(synth_classes, synth_per_class, (input_size, input_size), seed)
    if not os.path.isdir(spec):
        raise DatasetError(f"dataset path {spec!r} does not exist")
    return load_folder_dataset(spec, (input_size, input_size))
