"""Soft-committee decisions over raw output fields and pairwise agreement."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

__all__ = [
    "PredictionSet",
    "CommitteeReport",
    "committee_decide",
    "agreement",
    "uncorrelated_baseline",
    "committee_report",
    "save_predictions",
    "load_predictions",
]


@dataclass
class PredictionSet:
    member_id: str
    fields: np.ndarray          # N x L raw output fields (no softmax)
    eval_hash: str = ""         # fingerprint of the evaluation set

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 2:
            raise InputError(f"{self.member_id}: fields must be N x L, got {self.fields.shape}")

    @property
    def labels(self) -> np.ndarray:
        return self.fields.argmax(axis=1)

    def __len__(self) -> int:
        return len(self.fields)


def _check_aligned(members: Sequence[PredictionSet], force: bool = False) -> None:
    if not members:
        raise InputError("a committee needs at least one member")
    shape = members[0].fields.shape
    for m in members[1:]:
        if m.fields.shape != shape:
            raise InputError(f"member {m.member_id} has fields {m.fields.shape}, "
                             f"{members[0].member_id} has {shape}")
    if not force:
        hashes = {m.eval_hash for m in members if m.eval_hash}
        if len(hashes) > 1:
            raise InputError("members were evaluated on different evaluation sets")


def committee_decide(members: Sequence[PredictionSet], force: bool = False) -> np.ndarray:
    """Argmax of the summed raw fields; ties go to the lowest label index."""
    _check_aligned(members, force)
    total = np.zeros_like(members[0].fields)
    for m in members:
        total += m.fields
    return total.argmax(axis=1)


def agreement(a: PredictionSet | np.ndarray, b: PredictionSet | np.ndarray,
              truth: np.ndarray) -> float:
    """Fraction of inputs on which both members are right or both are wrong."""
    la = a.labels if isinstance(a, PredictionSet) else np.asarray(a)
    lb = b.labels if isinstance(b, PredictionSet) else np.asarray(b)
    truth = np.asarray(truth)
    if not len(la) == len(lb) == len(truth):
        raise InputError("agreement needs aligned prediction sets")
    if len(truth) == 0:
        raise InputError("agreement on an empty set is undefined")
    return float(np.mean((la == truth) == (lb == truth)))


def uncorrelated_baseline(p: float) -> float:
    """Agreement expected from two independent predictors of accuracy ``p``."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"accuracy {p} outside [0, 1]")
    return p * p + (1 - p) * (1 - p)


@dataclass
class CommitteeReport:
    member_ids: list[str]
    individual_accuracy: list[float]
    mean_individual_accuracy: float
    committee_accuracy: float
    agreement: list[list[float]]
    mean_agreement: float | None
    uncorrelated_baseline: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def committee_report(members: Sequence[PredictionSet], truth: np.ndarray,
                     force: bool = False) -> CommitteeReport:
    truth = np.asarray(truth)
    _check_aligned(members, force)
    if len(members[0]) != len(truth):
        raise InputError(f"{len(truth)} truth labels for {len(members[0])} inputs")
    accs = [float(np.mean(m.labels == truth)) for m in members]
    n = len(members)
    matrix = [[1.0 if i == j else agreement(members[i], members[j], truth) for j in range(n)]
              for i in range(n)]
    off = [matrix[i][j] for i in range(n) for j in range(n) if i != j]
    mean_acc = float(np.mean(accs))
    return CommitteeReport(
        member_ids=[m.member_id for m in members],
        individual_accuracy=accs,
        mean_individual_accuracy=mean_acc,
        committee_accuracy=float(np.mean(committee_decide(members, force) == truth)),
        agreement=matrix,
        mean_agreement=float(np.mean(off)) if off else None,
        uncorrelated_baseline=uncorrelated_baseline(mean_acc),
    )


def truth_hash(labels: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(labels, dtype=np.int64).tobytes()).hexdigest()


def save_predictions(ps: PredictionSet, path: str | Path, truth: np.ndarray | None = None) -> None:
    """Write a field dump: ``.npz`` (binary) or CSV with ``#`` metadata lines.

    CSV columns are ``index, label, f0 .. f{L-1}``; ``label`` is the ground
    truth when given, else -1.
    """
    path = Path(path)
    truth = np.full(len(ps), -1) if truth is None else np.asarray(truth)
    if path.suffix == ".npz":
        np.savez(path, fields=ps.fields, truth=truth, member_id=ps.member_id, eval_hash=ps.eval_hash)
        return
    with open(path, "w", newline="") as fh:
        fh.write(f"# member_id={ps.member_id}\n# eval_hash={ps.eval_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "label"] + [f"f{j}" for j in range(ps.fields.shape[1])])
        for i, (row, lab) in enumerate(zip(ps.fields, truth)):
            writer.writerow([i, int(lab)] + [repr(float(v)) for v in row])


def load_predictions(path: str | Path) -> tuple[PredictionSet, np.ndarray]:
    """Inverse of :func:`save_predictions`; returns ``(prediction set, truth)``."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return (PredictionSet(str(z["member_id"]), z["fields"], str(z["eval_hash"])),
                    z["truth"])
    meta = {}
    with open(path, newline="") as fh:
        lines = [line for line in fh]
    rows = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        else:
            rows.append(line)
    reader = csv.reader(rows)
    next(reader)
    data = np.array([[float(v) for v in r] for r in reader if r], dtype=np.float64)
    if data.size == 0:
        raise InputError(f"{path} holds no predictions")
    if not np.array_equal(data[:, 0], np.arange(len(data))):
        raise InputError(f"{path}: input indices are not 0..N-1 in order")
    return (PredictionSet(meta.get("member_id", path.stem), data[:, 2:], meta.get("eval_hash", "")),
            data[:, 1].astype(np.int64))
