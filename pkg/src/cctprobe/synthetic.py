"""Synthetic CIFAR-format data for offline runs and tests.

Each label owns a smooth colour prototype (a random 4x4x3 grid upsampled to
32x32); an image is its label's prototype under a random cyclic shift plus
Gaussian pixel noise. ``noise`` controls how separable the labels are.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_cifar


def synthetic_images(labels: np.ndarray, num_labels: int, rng: np.random.Generator,
                     noise: float = 40.0, max_shift: int = 4, prototype_seed: int = 0) -> np.ndarray:
    proto_rng = np.random.default_rng(prototype_seed)
    coarse = proto_rng.uniform(40, 215, size=(num_labels, 3, 4, 4))
    protos = coarse.repeat(8, axis=2).repeat(8, axis=3)
    out = np.empty((len(labels), 3, 32, 32))
    for i, lab in enumerate(labels):
        dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
        out[i] = np.roll(protos[lab], (dy, dx), axis=(1, 2))
    out += rng.normal(0.0, noise, out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def make_synthetic_cifar(root: str | Path, num_labels: int = 100, train_per_label: int = 20,
                         val_per_label: int = 10, variant: str = "cifar100", seed: int = 0,
                         noise: float = 40.0) -> Path:
    """Write ``train.bin``/``test.bin`` (or the CIFAR-10 file set) under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)

    def split(per_label):
        labels = np.tile(np.arange(num_labels), per_label)
        rng.shuffle(labels)
        return synthetic_images(labels, num_labels, rng, noise, prototype_seed=seed), labels

    train_x, train_y = split(train_per_label)
    val_x, val_y = split(val_per_label)
    if variant == "cifar100":
        write_cifar(root / "train.bin", train_x, train_y, variant)
        write_cifar(root / "test.bin", val_x, val_y, variant)
    else:
        chunks = np.array_split(np.arange(len(train_y)), 5)
        for i, idx in enumerate(chunks, start=1):
            write_cifar(root / f"data_batch_{i}.bin", train_x[idx], train_y[idx], variant)
        write_cifar(root / "test_batch.bin", val_x, val_y, variant)
    return root
