"""CIFAR binary ingestion, per-image normalisation and batch augmentation."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, IngestionError, InputError

__all__ = [
    "Dataset",
    "Batch",
    "AugmentConfig",
    "load_cifar",
    "write_cifar",
    "normalize_per_image",
    "normalize_images",
    "normalize_dataset",
    "one_hot",
    "make_batch",
    "mixup",
    "cutmix",
    "random_erase",
    "augment_batch",
    "select_labels",
    "limit_per_label",
    "downscale",
]

PIXELS = 3 * 32 * 32

# variant -> (label bytes per record, index of the label byte used, label count,
#             subdirectory, train files, validation files)
_LAYOUTS = {
    "cifar100": (2, 1, 100, "cifar-100-binary", ["train.bin"], ["test.bin"]),
    "cifar10": (1, 0, 10, "cifar-10-batches-bin",
                [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
}
_SPLITS = {"train": "train", "validation": "validation", "val": "validation", "test": "validation"}


@dataclass
class Dataset:
    images: torch.Tensor           # N x C x S x S, float32
    labels: torch.Tensor           # N, int64
    num_labels: int
    split: str = "train"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.dim() != 4:
            raise InputError(f"images must be N x C x S x S, got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_labels):
            raise InputError(f"labels must lie in [0, {self.num_labels})")

    def __len__(self) -> int:
        return len(self.labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.contiguous().numpy().tobytes())
        h.update(self.labels.contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class Batch:
    inputs: torch.Tensor   # B x C x S x S
    targets: torch.Tensor  # B x L, rows are distributions


def _resolve_files(path: Path, variant: str, split: str) -> list[Path]:
    label_bytes, _, _, subdir, train_files, val_files = _LAYOUTS[variant]
    names = train_files if split == "train" else val_files
    if path.is_file():
        return [path]
    for root in (path, path / subdir):
        if all((root / n).is_file() for n in names):
            return [root / n for n in names]
    raise IngestionError(f"no {variant} {split} files ({', '.join(names)}) under {path}")


def load_cifar(path: str | Path, variant: str = "cifar100", split: str = "train") -> Dataset:
    """Read the standard CIFAR binary format; pixels are scaled to [0, 1].

    ``path`` may be a single ``.bin`` file, the directory holding the files,
    or its parent (``cifar-100-binary`` / ``cifar-10-batches-bin``).
    """
    if variant not in _LAYOUTS:
        raise ConfigurationError(f"unknown variant {variant!r}", "variant")
    if split not in _SPLITS:
        raise ConfigurationError(f"unknown split {split!r}", "split")
    split = _SPLITS[split]
    label_bytes, label_index, num_labels, *_ = _LAYOUTS[variant]
    record = label_bytes + PIXELS
    images, labels = [], []
    for file in _resolve_files(Path(path), variant, split):
        raw = np.fromfile(file, dtype=np.uint8)
        if raw.size == 0:
            raise IngestionError(f"{file} is empty", offset=0)
        whole = raw.size // record
        if raw.size % record:
            raise IngestionError(f"{file} ends in a truncated record", offset=whole * record)
        rows = raw.reshape(whole, record)
        lab = rows[:, label_index].astype(np.int64)
        bad = np.flatnonzero(lab >= num_labels)
        if bad.size:
            raise IngestionError(f"{file}: label {lab[bad[0]]} >= {num_labels}",
                                 offset=int(bad[0]) * record + label_index)
        images.append(rows[:, label_bytes:].reshape(whole, 3, 32, 32))
        labels.append(lab)
    pixels = torch.from_numpy(np.concatenate(images)).float().div_(255.0)
    return Dataset(pixels, torch.from_numpy(np.concatenate(labels)), num_labels, split,
                   {"variant": variant, "source": str(path)})


def write_cifar(path: str | Path, images: np.ndarray, labels: np.ndarray,
                variant: str = "cifar100", coarse: np.ndarray | None = None) -> None:
    """Write uint8 ``images`` (N x 3 x 32 x 32) in the CIFAR binary layout."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if variant == "cifar100":
        coarse = np.zeros_like(labels) if coarse is None else np.asarray(coarse, np.uint8).reshape(-1, 1)
        rows = np.hstack([coarse, labels, images])
    else:
        rows = np.hstack([labels, images])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows.tofile(path)


def normalize_per_image(image: torch.Tensor) -> torch.Tensor:
    """Subtract the image mean and divide by its standard deviation (all pixels and channels)."""
    if image.numel() < 2:
        raise InputError("an image needs more than one pixel to be normalised")
    return normalize_images(image.unsqueeze(0))[0]


def normalize_images(images: torch.Tensor) -> torch.Tensor:
    flat = images.reshape(len(images), -1).to(torch.float64)
    mean = flat.mean(dim=1, keepdim=True)
    std = flat.std(dim=1, correction=0, keepdim=True)
    degenerate = torch.nonzero(std.squeeze(1) == 0).flatten()
    if len(degenerate):
        raise InputError(f"image {int(degenerate[0])} has zero variance")
    return ((flat - mean) / std).reshape(images.shape).to(images.dtype)


def normalize_dataset(ds: Dataset) -> Dataset:
    return Dataset(normalize_images(ds.images), ds.labels, ds.num_labels, ds.split,
                   dict(ds.metadata, normalized="per-image"))


def one_hot(labels: torch.Tensor, num_labels: int) -> torch.Tensor:
    return F.one_hot(labels, num_labels).float()


def make_batch(inputs: torch.Tensor, labels: torch.Tensor, num_labels: int) -> Batch:
    return Batch(inputs, one_hot(labels, num_labels))


def _check_pair(a: Batch, b: Batch, lam: float) -> None:
    if a.inputs.shape != b.inputs.shape or a.targets.shape != b.targets.shape:
        raise InputError("batches to mix must have identical shapes")
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"mixing coefficient {lam} outside [0, 1]")


def mixup(batch_a: Batch, batch_b: Batch, lam: float) -> Batch:
    _check_pair(batch_a, batch_b, lam)
    return Batch(lam * batch_a.inputs + (1 - lam) * batch_b.inputs,
                 lam * batch_a.targets + (1 - lam) * batch_b.targets)


def cutmix_box(size: int, lam: float, rng: np.random.Generator,
               center: tuple[int, int] | None = None) -> tuple[int, int, int, int]:
    """Box ``(y1, y2, x1, x2)`` of side ``floor(size * sqrt(1 - lam))`` clipped to the image."""
    side = int(size * math.sqrt(1.0 - lam))
    if center is None:
        cy, cx = (int(v) for v in rng.integers(0, size, 2))
    else:
        cy, cx = center
    y1, x1 = cy - side // 2, cx - side // 2
    y2, x2 = y1 + side, x1 + side
    return max(y1, 0), min(y2, size), max(x1, 0), min(x2, size)


def cutmix(batch_a: Batch, batch_b: Batch, lam: float,
           rng: np.random.Generator | None = None,
           center: tuple[int, int] | None = None) -> Batch:
    """Paste one box from ``batch_b`` into ``batch_a``; targets use the realised area ratio."""
    _check_pair(batch_a, batch_b, lam)
    rng = rng if rng is not None else np.random.default_rng()
    h, w = batch_a.inputs.shape[-2:]
    if h != w:
        raise InputError("cutmix expects square images")
    y1, y2, x1, x2 = cutmix_box(h, lam, rng, center)
    inputs = batch_a.inputs.clone()
    inputs[..., y1:y2, x1:x2] = batch_b.inputs[..., y1:y2, x1:x2]
    realised = 1.0 - (y2 - y1) * (x2 - x1) / (h * w)
    return Batch(inputs, realised * batch_a.targets + (1 - realised) * batch_b.targets)


def random_erase(image: torch.Tensor, p: float = 0.25,
                 area_range: tuple[float, float] = (0.02, 1 / 3),
                 aspect_range: tuple[float, float] = (0.3, 3.3),
                 rng: np.random.Generator | None = None,
                 attempts: int = 100) -> torch.Tensor:
    """Replace a random rectangle of a C x H x W image with standard-normal noise.

    The erased pixel count stays within ``[floor(lo * H * W), ceil(hi * H * W)]``;
    when no rectangle fits after ``attempts`` draws the image is returned unchanged.
    """
    if not 0.0 <= p <= 1.0:
        raise InputError(f"erase probability {p} outside [0, 1]")
    lo, hi = area_range
    if not 0.0 < lo <= hi <= 1.0 or not 0.0 < aspect_range[0] <= aspect_range[1]:
        raise InputError("invalid area or aspect range")
    rng = rng if rng is not None else np.random.default_rng()
    if p == 0.0 or rng.random() >= p:
        return image
    _, height, width = image.shape
    area = height * width
    min_count, max_count = math.floor(lo * area), math.ceil(hi * area)
    log_r = (math.log(aspect_range[0]), math.log(aspect_range[1]))
    for _ in range(attempts):
        target = rng.uniform(lo, hi) * area
        aspect = math.exp(rng.uniform(*log_r))
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h <= height and 0 < w <= width and min_count <= h * w <= max_count:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            out = image.clone()
            noise = rng.standard_normal((image.shape[0], h, w)).astype(np.float32)
            out[:, top:top + h, left:left + w] = torch.from_numpy(noise).to(image.dtype)
            return out
    return image


@dataclass
class AugmentConfig:
    mixup_alpha: float = 1.0
    cutmix_alpha: float = 1.0
    erase_p: float = 0.25
    erase_area: tuple[float, float] = (0.02, 1 / 3)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    randaugment: bool = False

    def __post_init__(self):
        if self.randaugment:
            raise ConfigurationError("RandAugment is unsupported", "randaugment")


def augment_batch(batch: Batch, rng: np.random.Generator, config: AugmentConfig) -> Batch:
    """Mixup or CutMix (even odds) against a shuffled copy, then per-image erasing."""
    perm = torch.from_numpy(rng.permutation(len(batch.inputs)))
    partner = Batch(batch.inputs[perm], batch.targets[perm])
    if rng.random() < 0.5:
        mixed = mixup(batch, partner, float(rng.beta(config.mixup_alpha, config.mixup_alpha)))
    else:
        mixed = cutmix(batch, partner, float(rng.beta(config.cutmix_alpha, config.cutmix_alpha)), rng)
    if config.erase_p > 0:
        erased = [random_erase(img, config.erase_p, config.erase_area, config.erase_aspect, rng)
                  for img in mixed.inputs]
        mixed = Batch(torch.stack(erased), mixed.targets)
    return mixed


def select_labels(ds: Dataset, labels: Sequence[int]) -> Dataset:
    """Keep only ``labels`` (in that order) and remap them to ``0..len(labels)-1``."""
    labels = list(labels)
    if len(set(labels)) != len(labels) or any(not 0 <= lab < ds.num_labels for lab in labels):
        raise ConfigurationError(f"invalid label subset {labels}", "labels")
    remap = torch.full((ds.num_labels,), -1, dtype=torch.long)
    remap[torch.tensor(labels)] = torch.arange(len(labels))
    new = remap[ds.labels]
    keep = new >= 0
    meta = dict(ds.metadata, labels=labels)
    return Dataset(ds.images[keep], new[keep], len(labels), ds.split, meta)


def limit_per_label(ds: Dataset, count: int) -> Dataset:
    """First ``count`` records of every label, record order preserved."""
    keep = torch.zeros(len(ds), dtype=torch.bool)
    for lab in range(ds.num_labels):
        keep[torch.nonzero(ds.labels == lab).flatten()[:count]] = True
    return Dataset(ds.images[keep], ds.labels[keep], ds.num_labels, ds.split,
                   dict(ds.metadata, per_label=count))


def downscale(ds: Dataset, size: int) -> Dataset:
    if size == ds.images.shape[-1]:
        return ds
    images = F.interpolate(ds.images, size=(size, size), mode="area")
    return Dataset(images, ds.labels, ds.num_labels, ds.split, dict(ds.metadata, downscale=size))
