"""Probe heads on frozen CCT prefixes and label-averaged field matrices.

A probe taps either the output of block ``m`` or the concatenated head
outputs of block ``m``'s attention (before the projection). A fresh classifier
head (sequence pooling plus one FC layer) is trained on the tap. Silencing
zeroes FC input columns on a *copy* of that head, leaving one attention head
(SHP) or one node (SNP) connected; averaging the resulting output fields per
validation label gives an L x L matrix, scaled so its largest element is 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .errors import ConfigurationError, InputError
from .model import CCT, model_hash, sequence_pool
from .trainer import OPTIMIZER_PRESETS, OptimizerConfig, Trainer

__all__ = [
    "ProbePoint",
    "Subject",
    "FieldMatrix",
    "Extractor",
    "ProbeHead",
    "attach_probe_head",
    "train_probe_head",
    "probe_accuracy",
    "label_fields",
    "tap_field_matrix",
    "head_field_matrix",
    "node_field_matrix",
    "hp_from_snp",
]

Tap = Literal["post_block", "post_attention"]


@dataclass(frozen=True)
class ProbePoint:
    block: int
    tap: Tap = "post_attention"

    def validate(self, num_blocks: int) -> None:
        if self.tap not in ("post_block", "post_attention"):
            raise ConfigurationError(f"unknown tap {self.tap!r}", "tap")
        if not 1 <= self.block <= num_blocks:
            raise ConfigurationError(f"block {self.block} outside 1..{num_blocks}", "block")

    def label(self) -> str:
        return f"m{self.block}-{self.tap}"


@dataclass(frozen=True)
class Subject:
    """What a field matrix measures: ``tap`` (nothing silenced), ``head``, ``node`` or ``hp``."""

    kind: Literal["tap", "head", "node", "hp"]
    index: int = 0
    head: int | None = None  # owning head, for nodes
    head_size: int | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "index": self.index, "head": self.head,
                "head_size": self.head_size}


@dataclass
class FieldMatrix:
    raw: np.ndarray               # L x L label-averaged fields, before scaling
    subject: Subject
    probe: ProbePoint | None = None
    model_hash: str = ""

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 2 or self.raw.shape[0] != self.raw.shape[1]:
            raise InputError(f"field matrix must be square, got {self.raw.shape}")

    @property
    def scale(self) -> float:
        """Largest raw element; normalising by a non-positive one is refused."""
        top = float(self.raw.max())
        if not top > 0:
            raise InputError(f"degenerate {self.subject.kind} {self.subject.index}: "
                             f"largest field {top:.3g} is not positive")
        return top

    @property
    def values(self) -> np.ndarray:
        return self.raw / self.scale

    @property
    def num_labels(self) -> int:
        return self.raw.shape[0]

    def save(self, csv_path: str | Path) -> None:
        """CSV of normalised values plus a ``.json`` sidecar next to it."""
        csv_path = Path(csv_path)
        np.savetxt(csv_path, self.values, delimiter=",", fmt="%.17g")
        sidecar = {
            "subject": self.subject.to_dict(),
            "probe": None if self.probe is None else {"block": self.probe.block, "tap": self.probe.tap},
            "normalization": self.scale,
            "model_hash": self.model_hash,
        }
        csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    def save_heatmap(self, png_path: str | Path, pixels_per_cell: int = 4) -> None:
        """Grayscale image: 1 is white, values <= 0 are black."""
        from PIL import Image

        img = (np.clip(self.values, 0.0, 1.0) * 255).round().astype(np.uint8)
        img = img.repeat(pixels_per_cell, axis=0).repeat(pixels_per_cell, axis=1)
        Image.fromarray(img, mode="L").save(png_path)


class Extractor(nn.Module):
    """Frozen CCT prefix ending at ``probe``."""

    def __init__(self, model: CCT, probe: ProbePoint):
        super().__init__()
        probe.validate(model.spec.num_blocks)
        self.model = model
        self.probe = probe
        for p in model.parameters():
            p.requires_grad_(False)

    @property
    def heads(self) -> int:
        return self.model.spec.heads_per_block[self.probe.block - 1]

    @property
    def dim(self) -> int:
        return self.model.spec.dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.model.features(images, self.probe.block, self.probe.tap)

    @torch.no_grad()
    def extract(self, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        self.model.eval()
        chunks = [self(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return torch.cat(chunks) if chunks else torch.empty(0, self.model.spec.num_tokens, self.dim)


class ProbeHead(nn.Module):
    """Sequence pooling followed by one FC layer to the labels."""

    def __init__(self, dim: int, num_labels: int, seed: int = 0, bias: bool = True):
        super().__init__()
        self.pool_weight = nn.Parameter(torch.empty(dim))
        self.fc = nn.Linear(dim, num_labels, bias=bias)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            nn.init.trunc_normal_(self.pool_weight, std=0.02, a=-0.04, b=0.04, generator=gen)
            nn.init.trunc_normal_(self.fc.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
            if bias:
                self.fc.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(sequence_pool(features, self.pool_weight))

    @torch.no_grad()
    def silenced_fields(self, features: torch.Tensor, keep: torch.Tensor,
                        silence_before_sp: bool = False) -> torch.Tensor:
        """Output fields (float64) with every FC input outside ``keep`` silenced.

        By default the pooling scores see the full features and only the FC
        weights are silenced; ``silence_before_sp`` also zeroes the silenced
        feature columns before pooling.
        """
        weight = self.fc.weight.detach().to(torch.float64).clone()
        weight[:, ~keep] = 0.0
        feats = features.to(torch.float64)
        if silence_before_sp:
            feats = feats * keep.to(torch.float64)
        pooled = sequence_pool(feats, self.pool_weight.detach().to(torch.float64))
        out = pooled @ weight.T
        if self.fc.bias is not None:
            out = out + self.fc.bias.detach().to(torch.float64)
        return out


def attach_probe_head(model: CCT, probe: ProbePoint, seed: int = 0,
                      bias: bool = True) -> tuple[Extractor, ProbeHead]:
    extractor = Extractor(model, probe)
    return extractor, ProbeHead(model.spec.dim, model.spec.num_labels, seed, bias)


def train_probe_head(extractor: Extractor, head: ProbeHead, dataset: Dataset,
                     config: OptimizerConfig | None = None,
                     validation: Dataset | None = None,
                     features: torch.Tensor | None = None) -> list[dict]:
    """Fit ``head`` on frozen features; the extractor is never updated.

    Features are computed once and cached, so augmentation does not apply.
    """
    config = config or OPTIMIZER_PRESETS["probe-head"]
    if config.augment is not None:
        config = config.replace(augment=None)
    feats = extractor.extract(dataset.images) if features is None else features
    val = None
    if validation is not None:
        val = (extractor.extract(validation.images), validation.labels)
    trainer = Trainer(head, config, feats, dataset.labels, dataset.num_labels, validation=val)
    return trainer.fit()


@torch.no_grad()
def probe_accuracy(extractor: Extractor, head: ProbeHead, validation: Dataset,
                   features: torch.Tensor | None = None) -> float:
    if len(validation) == 0:
        raise InputError("probe accuracy on an empty validation set is undefined")
    feats = extractor.extract(validation.images) if features is None else features
    head.eval()
    pred = head(feats).argmax(dim=-1)
    return float((pred == validation.labels).double().mean())


def label_fields(fields: torch.Tensor, labels: torch.Tensor, num_labels: int) -> np.ndarray:
    """Row ``i`` = mean field vector over inputs whose label is ``i``."""
    counts = torch.bincount(labels, minlength=num_labels)
    empty = torch.nonzero(counts == 0).flatten()
    if len(empty):
        raise InputError(f"label {int(empty[0])} has no validation inputs")
    sums = torch.zeros(num_labels, fields.shape[1], dtype=torch.float64)
    sums.index_add_(0, labels, fields.to(torch.float64))
    return (sums / counts.unsqueeze(1).to(torch.float64)).numpy()


def _matrix(extractor: Extractor, head: ProbeHead, keep: torch.Tensor, validation: Dataset,
            subject: Subject, silence_before_sp: bool, features: torch.Tensor | None) -> FieldMatrix:
    feats = extractor.extract(validation.images) if features is None else features
    fields = head.silenced_fields(feats, keep, silence_before_sp)
    raw = label_fields(fields, validation.labels, validation.num_labels)
    return FieldMatrix(raw, subject, extractor.probe, model_hash(extractor.model))


def tap_field_matrix(extractor: Extractor, head: ProbeHead, validation: Dataset,
                     silence_before_sp: bool = False,
                     features: torch.Tensor | None = None) -> FieldMatrix:
    keep = torch.ones(extractor.dim, dtype=torch.bool)
    return _matrix(extractor, head, keep, validation, Subject("tap"), silence_before_sp, features)


def head_field_matrix(extractor: Extractor, head: ProbeHead, head_index: int, validation: Dataset,
                      silence_before_sp: bool = False,
                      features: torch.Tensor | None = None) -> FieldMatrix:
    """SHP matrix: only the columns of attention head ``head_index`` stay connected."""
    heads = extractor.heads
    if not 0 <= head_index < heads:
        raise ConfigurationError(f"head {head_index} outside 0..{heads - 1}", "head_index")
    size = extractor.dim // heads
    keep = torch.zeros(extractor.dim, dtype=torch.bool)
    keep[head_index * size:(head_index + 1) * size] = True
    subject = Subject("head", head_index, head_index, size)
    return _matrix(extractor, head, keep, validation, subject, silence_before_sp, features)


def node_field_matrix(extractor: Extractor, head: ProbeHead, node_index: int, validation: Dataset,
                      silence_before_sp: bool = False,
                      features: torch.Tensor | None = None) -> FieldMatrix:
    """SNP matrix: only FC input ``node_index`` stays connected."""
    if not 0 <= node_index < extractor.dim:
        raise ConfigurationError(f"node {node_index} outside 0..{extractor.dim - 1}", "node_index")
    size = extractor.dim // extractor.heads
    keep = torch.zeros(extractor.dim, dtype=torch.bool)
    keep[node_index] = True
    subject = Subject("node", node_index, node_index // size, size)
    return _matrix(extractor, head, keep, validation, subject, silence_before_sp, features)


def hp_from_snp(snp_matrices: list[FieldMatrix]) -> FieldMatrix:
    """Head performance as the element-wise mean of a head's raw SNP fields."""
    if not snp_matrices:
        raise InputError("no SNP matrices given")
    first = snp_matrices[0]
    for m in snp_matrices:
        s = m.subject
        if s.kind != "node" or s.head != first.subject.head or m.probe != first.probe \
                or m.model_hash != first.model_hash or m.raw.shape != first.raw.shape:
            raise InputError("SNP matrices mix subjects (different heads, probes or models)")
    nodes = sorted(m.subject.index for m in snp_matrices)
    size = first.subject.head_size
    if size is not None:
        expected = list(range(first.subject.head * size, (first.subject.head + 1) * size))
        if nodes != expected:
            raise InputError(f"expected all {size} nodes of head {first.subject.head}")
    raw = np.mean([m.raw for m in snp_matrices], axis=0)
    return FieldMatrix(raw, Subject("hp", first.subject.head, first.subject.head, size),
                       first.probe, first.model_hash)
