"""Synthetic lesion dataset, splits, and the dataset file format.

Images are small grayscale patches of correlated noise ("tissue") carrying
zero or more bright Gaussian-profile lesions. An image is labelled 1 when at
least one lesion pixel lies inside the central ``center_size`` x
``center_size`` window and 0 otherwise, so class evidence is small and local.
Lesions outside the window appear in both classes as distractors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import container
from .errors import CheckpointMismatchError

DATASET_KIND = "dataset"


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 4000
    image_size: int = 32
    center_size: int = 10
    radius_min: int = 1
    radius_max: int = 3
    amplitude_min: float = 0.35
    amplitude_max: float = 0.55
    background_mean: float = 0.40
    background_std: float = 0.08
    background_sigma: float = 1.0
    pixel_noise_std: float = 0.05
    max_distractors: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples <= 0 or self.n_samples % 2:
            raise ValueError(f"n_samples must be positive and even, got {self.n_samples}")
        if self.image_size <= 0 or self.center_size <= 0:
            raise ValueError("image_size and center_size must be positive")
        if self.center_size >= self.image_size:
            raise ValueError("center_size must be smaller than image_size")
        if not 1 <= self.radius_min <= self.radius_max:
            raise ValueError("need 1 <= radius_min <= radius_max")
        if not 0 < self.amplitude_min <= self.amplitude_max:
            raise ValueError("need 0 < amplitude_min <= amplitude_max")
        if self.background_std < 0 or self.background_sigma <= 0 or self.pixel_noise_std < 0 or self.max_distractors < 0:
            raise ValueError("background_std, pixel_noise_std, max_distractors >= 0 and background_sigma > 0 required")
        for r in range(self.radius_min, self.radius_max + 1):
            inside, outside = _placements(self.image_size, self.center_size, r)
            if not len(outside):
                raise ValueError(
                    f"lesion radius {r} cannot be placed outside the {self.center_size}px "
                    f"center window of a {self.image_size}px image"
                )
            if not len(inside):
                raise ValueError(f"lesion radius {r} does not fit in the image")


@dataclass
class Dataset:
    """Labelled images stored as uint8, plus the lesion geometry behind each label.

    ``blobs`` has shape (N, max_blobs, 3) with rows ``(row, col, radius)``;
    unused rows are -1.
    """

    images: np.ndarray
    labels: np.ndarray
    blobs: np.ndarray
    spec: SyntheticSpec

    def __len__(self) -> int:
        return len(self.labels)

    def tensors(self, indices=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Float64 images in [0, 1] and int64 labels, optionally restricted to ``indices``."""
        images, labels = self.images, self.labels
        if indices is not None:
            images, labels = images[indices], labels[indices]
        x = torch.from_numpy(images.astype(np.float64) / 255.0)
        return x, torch.from_numpy(labels.astype(np.int64))


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


def window_bounds(image_size: int, center_size: int) -> tuple[int, int]:
    lo = (image_size - center_size) // 2
    return lo, lo + center_size


@lru_cache(maxsize=None)
def _disk_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    mask = dy**2 + dx**2 <= radius**2
    return np.stack([dy[mask], dx[mask]], axis=1)


def blob_touches_window(row: int, col: int, radius: int, image_size: int, center_size: int) -> bool:
    lo, hi = window_bounds(image_size, center_size)
    pix = _disk_offsets(radius) + (row, col)
    inside = (pix[:, 0] >= lo) & (pix[:, 0] < hi) & (pix[:, 1] >= lo) & (pix[:, 1] < hi)
    return bool(inside.any())


@lru_cache(maxsize=None)
def _placements(image_size: int, center_size: int, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Lesion centres keeping the whole disk in the image, split by window contact."""
    inside, outside = [], []
    for row in range(radius, image_size - radius):
        for col in range(radius, image_size - radius):
            touches = blob_touches_window(row, col, radius, image_size, center_size)
            (inside if touches else outside).append((row, col))
    return np.array(inside, dtype=np.int64).reshape(-1, 2), np.array(outside, dtype=np.int64).reshape(-1, 2)


def label_from_blobs(blobs: np.ndarray, image_size: int, center_size: int) -> int:
    """Apply the labelling rule to one sample's lesion table."""
    for row, col, radius in blobs:
        if radius < 0:
            continue
        if blob_touches_window(int(row), int(col), int(radius), image_size, center_size):
            return 1
    return 0


def _stamp(canvas: np.ndarray, row: int, col: int, radius: int, amplitude: float) -> None:
    off = _disk_offsets(radius)
    d2 = (off**2).sum(axis=1)
    canvas[row + off[:, 0], col + off[:, 1]] += amplitude * np.exp(-d2 / (2.0 * radius**2))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate an exactly balanced, seed-deterministic dataset."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, size = spec.n_samples, spec.image_size

    labels = np.repeat(np.array([1, 0], dtype=np.int64), n // 2)
    labels = labels[rng.permutation(n)]

    field = rng.standard_normal((n, size, size))
    field = gaussian_filter(field, sigma=(0, spec.background_sigma, spec.background_sigma), mode="wrap")
    field /= field.std(axis=(1, 2), keepdims=True)
    canvas = spec.background_mean + spec.background_std * field

    max_blobs = spec.max_distractors + 1
    blobs = np.full((n, max_blobs, 3), -1, dtype=np.int64)
    for i in range(n):
        slot = 0
        n_blobs = int(rng.integers(0, spec.max_distractors + 1)) + int(labels[i])
        for j in range(n_blobs):
            radius = int(rng.integers(spec.radius_min, spec.radius_max + 1))
            inside, outside = _placements(size, spec.center_size, radius)
            pool = inside if (labels[i] == 1 and j == 0) else outside
            row, col = pool[rng.integers(len(pool))]
            amplitude = rng.uniform(spec.amplitude_min, spec.amplitude_max)
            _stamp(canvas[i], int(row), int(col), radius, amplitude)
            blobs[i, slot] = (row, col, radius)
            slot += 1

    canvas += spec.pixel_noise_std * rng.standard_normal(canvas.shape)
    images = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)[:, None]
    return Dataset(images=images, labels=labels, blobs=blobs, spec=spec)


def split_dataset(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Deterministic disjoint train/val/test partition of ``range(n)``.

    Sizes are the floors of ``fraction * n`` with leftovers handed out by
    largest remainder.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions.tolist()}")
    raw = fractions * n
    sizes = np.floor(raw).astype(np.int64)
    for idx in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[idx] += 1
    if np.any(sizes == 0):
        raise ValueError(f"split sizes {sizes.tolist()} contain an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(train=np.sort(perm[:a]), val=np.sort(perm[a:b]), test=np.sort(perm[b:]), seed=seed)


def save_dataset(dataset: Dataset, path) -> None:
    meta = {"kind": DATASET_KIND, "spec": dataclasses.asdict(dataset.spec)}
    arrays = {"images": dataset.images, "labels": dataset.labels, "blobs": dataset.blobs}
    container.write(path, meta, arrays)


def load_dataset(path) -> Dataset:
    meta, arrays = container.read(path)
    if meta.get("kind") != DATASET_KIND:
        raise CheckpointMismatchError(f"{path} holds a {meta.get('kind')!r}, not a dataset")
    spec = SyntheticSpec(**meta["spec"])
    images = arrays["images"]
    if images.shape[0] != spec.n_samples or images.shape[-1] != spec.image_size:
        raise CheckpointMismatchError(f"image array {images.shape} disagrees with the stored spec")
    return Dataset(images=images, labels=arrays["labels"], blobs=arrays["blobs"], spec=spec)
