"""Clipping, diagonal-cluster extraction and per-block SHP statistics.

Cluster rule: labels ``i != j`` are linked when both ``B[i, j]`` and
``B[j, i]`` are set. A label is active when its diagonal element is set or
it has a link. Clusters are the connected components of active labels
(a singleton without its diagonal element is dropped). True elements inside
some cluster's S x S block are signal; all other true elements are noise.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InputError

__all__ = [
    "ClippedMatrix",
    "ClusterReport",
    "StatsRow",
    "TABLE_COLUMNS",
    "clip",
    "extract_clusters",
    "block_statistics",
    "noise_terms",
    "label_coverage",
    "write_stats_csv",
    "read_stats_csv",
]

MAX_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ClippedMatrix:
    mask: np.ndarray
    theta: float

    @property
    def total(self) -> int:
        return int(self.mask.sum())


def clip(matrix, theta: float) -> ClippedMatrix:
    """Boolean ``values >= theta`` for a max-normalised matrix (FieldMatrix or array)."""
    values = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    if not 0.0 < theta <= 1.0:
        raise InputError(f"threshold {theta} outside (0, 1]")
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise InputError(f"expected a square matrix, got shape {values.shape}")
    if abs(values.max() - 1.0) > MAX_TOLERANCE:
        raise InputError(f"matrix is not max-normalised (max = {values.max()!r})")
    return ClippedMatrix(values >= theta, float(theta))


@dataclass
class ClusterReport:
    clusters: list[tuple[int, ...]]
    diag: int
    noise: int
    in_cluster: int
    permutation: list[int]
    noise_coords: list[tuple[int, int]] = field(default_factory=list)
    theta: float | None = None

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    @property
    def membership(self) -> int:
        return sum(len(c) for c in self.clusters)

    def to_json(self) -> str:
        return json.dumps({
            "theta": self.theta,
            "clusters": [list(c) for c in self.clusters],
            "diag": self.diag,
            "noise": self.noise,
            "in_cluster": self.in_cluster,
            "permutation": self.permutation,
            "noise_coords": [list(c) for c in self.noise_coords],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ClusterReport":
        d = json.loads(text)
        return cls([tuple(c) for c in d["clusters"]], d["diag"], d["noise"], d["in_cluster"],
                   d["permutation"], [tuple(c) for c in d["noise_coords"]], d["theta"])


def extract_clusters(clipped: ClippedMatrix | np.ndarray) -> ClusterReport:
    B = np.asarray(getattr(clipped, "mask", clipped), dtype=bool)
    theta = getattr(clipped, "theta", None)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise InputError(f"expected a square Boolean matrix, got shape {B.shape}")
    L = B.shape[0]
    diagonal = np.diag(B).copy()
    mutual = B & B.T
    np.fill_diagonal(mutual, False)
    active = diagonal | mutual.any(axis=1)

    if mutual.any():
        _, comp = connected_components(csr_matrix(mutual), directed=False)
    else:
        comp = np.arange(L)
    members: dict[int, list[int]] = {}
    for label in np.flatnonzero(active):
        members.setdefault(int(comp[label]), []).append(int(label))
    clusters = sorted(
        (tuple(m) for m in members.values() if len(m) > 1 or diagonal[m[0]]),
        key=lambda c: c[0],
    )

    cluster_id = np.full(L, -1)
    for cid, c in enumerate(clusters):
        cluster_id[list(c)] = cid
    in_block = (cluster_id[:, None] == cluster_id[None, :]) & (cluster_id[:, None] >= 0)
    noise_mask = B & ~in_block
    placed = [label for c in clusters for label in c]
    seen = set(placed)
    permutation = placed + [i for i in range(L) if i not in seen]
    return ClusterReport(
        clusters=list(clusters),
        diag=int(diagonal.sum()),
        noise=int(noise_mask.sum()),
        in_cluster=int((B & in_block).sum()),
        permutation=permutation,
        noise_coords=[(int(i), int(j)) for i, j in zip(*np.nonzero(noise_mask))],
        theta=theta,
    )


@dataclass
class StatsRow:
    block: int | str
    attn_acc: float
    n_c: float
    c_s: float
    diag: float
    n: float
    n_label: float
    n_noise: float
    n_inter: float
    snr: float


TABLE_COLUMNS = ["Block", "Attn.Acc.", "N_c", "C_s", "Diag", "n", "N_label", "N_noise", "N_inter",
                 "SNR"]


def noise_terms(heads: int, mean_noise: float, n_label: float, c_s: float,
                num_labels: int) -> tuple[float, float, float]:
    """``(N_noise, N_inter, SNR)`` from a block's head count and per-head aggregates."""
    L = num_labels
    n_noise = heads * mean_noise / L ** 2
    n_inter = n_label * (c_s - 1) / L
    denom = n_noise + n_inter
    return n_noise, n_inter, (n_label / denom if denom > 0 else math.inf)


def block_statistics(reports: Sequence[ClusterReport], num_labels: int, attn_acc: float = math.nan,
                     block: int | str = "") -> StatsRow:
    """Average one probed block's per-head cluster reports into a table row.

    Signal is the mean number of times a label appears in some cluster
    (``N_label``). External noise per matrix element is ``sum_h n_h / L^2``;
    internal noise per label is ``N_label (C_s - 1) / L``.
    """
    if not reports:
        raise InputError("block statistics need at least one report")
    L = num_labels
    clusters = sum(r.num_clusters for r in reports)
    membership = sum(r.membership for r in reports)
    if clusters == 0:
        raise InputError("no clusters in any report; mean cluster size is undefined")
    c_s = membership / clusters
    n_label = membership / L
    mean_noise = sum(r.noise for r in reports) / len(reports)
    n_noise, n_inter, snr = noise_terms(len(reports), mean_noise, n_label, c_s, L)
    return StatsRow(
        block=block,
        attn_acc=attn_acc,
        n_c=clusters / len(reports),
        c_s=c_s,
        diag=sum(r.diag for r in reports) / len(reports),
        n=mean_noise,
        n_label=n_label,
        n_noise=n_noise,
        n_inter=n_inter,
        snr=snr,
    )


def label_coverage(reports: Sequence[ClusterReport], num_labels: int) -> np.ndarray:
    """How many (head, cluster) pairs contain each label."""
    counts = np.zeros(num_labels, dtype=np.int64)
    for r in reports:
        for c in r.clusters:
            counts[list(c)] += 1
    return counts


def write_stats_csv(rows: Sequence[StatsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for r in rows:
            writer.writerow([r.block] + [repr(float(v)) for v in list(asdict(r).values())[1:]])


def read_stats_csv(path: str | Path) -> list[StatsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TABLE_COLUMNS:
            raise InputError(f"unexpected header {header}")
        return [StatsRow(row[0], *(float(v) for v in row[1:])) for row in reader]
