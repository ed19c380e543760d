from __future__ import annotations

import numpy as np
import pytest
import torch

from cctprobe.architecture import ArchitectureSpec, get_preset
from cctprobe.data import downscale, load_cifar, normalize_dataset, select_labels
from cctprobe.model import build_model
from cctprobe.synthetic import make_synthetic_cifar
from cctprobe.trainer import OptimizerConfig, Schedule, train

DESK_OPT = OptimizerConfig(lr=3e-3, weight_decay=6e-2, batch_size=32, epochs=30,
                           schedule=Schedule("cosine"), seed=0)


def tiny_spec(**changes) -> ArchitectureSpec:
    base = ArchitectureSpec(num_conv_layers=1, num_blocks=2, dim=16, heads_per_block=(4, 2),
                            num_labels=5, input_size=8, ff_expansion=2.0)
    return base.replace(**changes) if changes else base


def load_tiny(root, split, size=16, labels=range(10)):
    ds = load_cifar(root, "cifar100", split)
    return normalize_dataset(downscale(select_labels(ds, list(labels)), size))


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    """10 labels x (20 train, 10 validation) images in CIFAR-100 layout."""
    return make_synthetic_cifar(tmp_path_factory.mktemp("cifar"), num_labels=10,
                                train_per_label=20, val_per_label=10, seed=0, noise=60)


@pytest.fixture(scope="session")
def tiny_data(synthetic_root):
    return load_tiny(synthetic_root, "train"), load_tiny(synthetic_root, "validation")


@pytest.fixture(scope="session")
def trained_tiny(tiny_data):
    """cct-1/3x1-tiny fitted to the synthetic training split.

    Returns (model, history). Shared across the session, so do not mutate it.
    """
    train_ds, val_ds = tiny_data
    model = build_model(get_preset("cct-1/3x1-tiny"), seed=1)
    _, history = train(model, train_ds, DESK_OPT, validation=val_ds)
    return model, history


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
