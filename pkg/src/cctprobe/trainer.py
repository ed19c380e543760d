"""AdamW training under soft-target cross-entropy, with resumable checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import torch
from torch import nn

from .architecture import ArchitectureSpec
from .data import AugmentConfig, Batch, Dataset, augment_batch, one_hot
from .errors import ChecksumError, ConfigurationError, InputError, NumericError
from .model import CCT, predict_logits, set_strict

__all__ = [
    "Schedule",
    "OptimizerConfig",
    "AdamWState",
    "OPTIMIZER_PRESETS",
    "soft_target_cross_entropy",
    "adamw_step",
    "schedule_value",
    "Trainer",
    "train",
    "accuracy",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "write_history_csv",
]


HISTORY_COLUMNS = ["epoch", "lr", "loss", "val_acc"]


@dataclass(frozen=True)
class Schedule:
    kind: Literal["cosine", "linear", "constant"] = "cosine"
    q: float = 1.0
    step: int = 1

    def __post_init__(self):
        if self.kind not in ("cosine", "linear", "constant"):
            raise ConfigurationError(f"unknown schedule {self.kind!r}", "schedule")
        if not 0 < self.q <= 1:
            raise ConfigurationError("decay factor q must lie in (0, 1]", "schedule.q")
        if self.step < 1:
            raise ConfigurationError("step must be >= 1", "schedule.step")

    @classmethod
    def linear(cls, q: float, step: int) -> "Schedule":
        return cls("linear", q, step)

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """``cosine``, ``constant`` or ``linear:Q,DT`` (e.g. ``linear:0.78,10``)."""
        if text in ("cosine", "constant"):
            return cls(text)
        if text.startswith("linear:"):
            q, dt = text[len("linear:"):].split(",")
            return cls.linear(float(q), int(dt))
        raise ConfigurationError(f"cannot parse schedule {text!r}", "schedule")


def schedule_value(schedule: Schedule, epoch: int, total_epochs: int, base: float) -> float:
    if schedule.kind == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
    if schedule.kind == "linear":
        return base * schedule.q ** (epoch // schedule.step)
    return base


@dataclass
class OptimizerConfig:
    lr: float = 6e-4
    weight_decay: float = 6e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 1000
    schedule: Schedule = field(default_factory=Schedule)
    grad_clip: float | None = None
    augment: AugmentConfig | None = None
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = Schedule(**self.schedule)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.augment.items()})
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ConfigurationError("must be > 0", "lr")
        if self.weight_decay < 0:
            raise ConfigurationError("must be >= 0", "weight_decay")
        if self.batch_size < 1:
            raise ConfigurationError("must be >= 1", "batch_size")
        if self.epochs < 1:
            raise ConfigurationError("must be >= 1", "epochs")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigurationError("moment coefficients must lie in [0, 1)", "betas")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "OptimizerConfig":
        return dataclasses.replace(self, **changes)


OPTIMIZER_PRESETS = {
    "main": OptimizerConfig(lr=6e-4, weight_decay=6e-2, batch_size=128, epochs=1000,
                            schedule=Schedule("cosine"), augment=AugmentConfig()),
    "probe-head": OptimizerConfig(lr=1e-3, weight_decay=6e-2, batch_size=128, epochs=100,
                                  schedule=Schedule.linear(0.78, 10)),
}


def soft_target_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-sum_j t_j log softmax(z)_j``."""
    if logits.shape != targets.shape:
        raise InputError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    return -(targets * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: AdamWState, config: OptimizerConfig,
               lr: float, weight_decay: float) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Only names present in ``grads`` are touched, so frozen tensors are
    excluded simply by leaving them out.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    beta1, beta2 = config.betas
    state.step += 1
    t = state.step
    bc1 = 1 - beta1 ** t
    bc2 = 1 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InputError(f"gradient shape {tuple(g.shape)} does not match {name}")
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        p.mul_(1 - lr * weight_decay)
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        denom = (v / bc2).sqrt_().add_(config.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


def accuracy(module: nn.Module, inputs: torch.Tensor, labels: torch.Tensor,
             batch_size: int = 256) -> float:
    if len(labels) == 0:
        raise InputError("accuracy on an empty set is undefined")
    logits = predict_logits(module, inputs, batch_size)
    return float((logits.argmax(dim=-1) == labels).float().mean())


class Trainer:
    """Mini-batch AdamW loop over a module mapping ``inputs`` to logits.

    Every piece of mutable state (parameters, moments, step, epoch, shuffling
    RNG, history) is captured by :meth:`checkpoint`, so a resumed run follows
    the uninterrupted trajectory exactly.
    """

    def __init__(self, module: nn.Module, config: OptimizerConfig,
                 inputs: torch.Tensor, labels: torch.Tensor, num_labels: int,
                 freeze: Iterable[str] = (), validation: tuple[torch.Tensor, torch.Tensor] | None = None):
        self.module = module
        self.config = config
        self.inputs, self.labels, self.num_labels = inputs, labels, num_labels
        self.validation = validation
        names = dict(module.named_parameters())
        freeze = set(freeze)
        unknown = freeze - names.keys()
        if unknown:
            raise ConfigurationError(f"unknown tensors {sorted(unknown)}", "freeze")
        for name, p in names.items():
            if name in freeze:
                p.requires_grad_(False)
        self.trainable = [n for n, p in names.items() if p.requires_grad]
        if not self.trainable:
            raise ConfigurationError("no trainable tensors remain", "freeze")
        self.state = AdamWState()
        self.epoch = 0
        self.rng = np.random.default_rng(config.seed)
        self.history: list[dict] = []
        if config.strict:
            set_strict(True)

    def _batches(self):
        order = torch.from_numpy(self.rng.permutation(len(self.labels)))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            batch = Batch(self.inputs[idx], one_hot(self.labels[idx], self.num_labels))
            if self.config.augment is not None:
                batch = augment_batch(batch, self.rng, self.config.augment)
            yield batch

    def run_epoch(self) -> dict:
        cfg = self.config
        lr = schedule_value(cfg.schedule, self.epoch, cfg.epochs, cfg.lr)
        wd = schedule_value(cfg.schedule, self.epoch, cfg.epochs, cfg.weight_decay)
        params = dict(self.module.named_parameters())
        self.module.train()
        total, count = 0.0, 0
        for batch in self._batches():
            for name in self.trainable:
                params[name].grad = None
            loss = soft_target_cross_entropy(self.module(batch.inputs), batch.targets)
            loss.backward()
            if cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_([params[n] for n in self.trainable], cfg.grad_clip)
            grads = {n: params[n].grad for n in self.trainable if params[n].grad is not None}
            adamw_step(params, grads, self.state, cfg, lr, wd)
            total += loss.item() * len(batch.inputs)
            count += len(batch.inputs)
        for name in self.trainable:
            params[name].grad = None
        record = {"epoch": self.epoch, "lr": lr, "loss": total / count, "val_acc": float("nan")}
        if self.validation is not None and len(self.validation[1]):
            record["val_acc"] = accuracy(self.module, *self.validation)
        self.history.append(record)
        self.epoch += 1
        return record

    def fit(self, until_epoch: int | None = None) -> list[dict]:
        until = self.config.epochs if until_epoch is None else min(until_epoch, self.config.epochs)
        while self.epoch < until:
            self.run_epoch()
        return self.history

    def checkpoint(self) -> "Checkpoint":
        spec = getattr(self.module, "spec", None)
        return Checkpoint(
            spec=spec,
            params={n: p.detach().clone() for n, p in self.module.named_parameters()},
            exp_avg={n: t.clone() for n, t in self.state.exp_avg.items()},
            exp_avg_sq={n: t.clone() for n, t in self.state.exp_avg_sq.items()},
            meta={
                "epoch": self.epoch,
                "step": self.state.step,
                "rng": self.rng.bit_generator.state,
                "config": self.config.to_dict(),
                "history": self.history,
                "trainable": self.trainable,
                "seed": getattr(self.module, "seed", None),
            },
        )

    def restore(self, ckpt: "Checkpoint") -> None:
        ckpt.restore_params(self.module)
        trainable = set(ckpt.meta.get("trainable", self.trainable))
        for n, p in self.module.named_parameters():
            p.requires_grad_(n in trainable)
        self.trainable = [n for n, _ in self.module.named_parameters() if n in trainable]
        self.state = AdamWState(ckpt.meta["step"],
                                {n: t.clone() for n, t in ckpt.exp_avg.items()},
                                {n: t.clone() for n, t in ckpt.exp_avg_sq.items()})
        self.epoch = ckpt.meta["epoch"]
        self.rng.bit_generator.state = ckpt.meta["rng"]
        self.history = [{k: r[k] for k in HISTORY_COLUMNS} for r in ckpt.meta["history"]]


def train(model: CCT, dataset: Dataset, config: OptimizerConfig, freeze_mask: Iterable[str] = (),
          validation: Dataset | None = None) -> tuple[CCT, list[dict]]:
    """Train ``model`` in place on pre-normalised ``dataset``; returns ``(model, history)``."""
    val = (validation.images, validation.labels) if validation is not None else None
    trainer = Trainer(model, config, dataset.images, dataset.labels, dataset.num_labels,
                      freeze_mask, val)
    return model, trainer.fit()


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([r["epoch"]] + [repr(r[k]) for k in HISTORY_COLUMNS[1:]])


# checkpoint format (all integers little-endian):
#   magic "CCTCKPT\0" | u32 version | 32-byte sha256 of the spec text
#   u32 n + n bytes JSON metadata (spec text, epoch, step, RNG state, config, history)
#   u32 tensor count, then per tensor:
#       u16 n + name | u8 dtype | u8 ndim | ndim x u64 shape | raw data
#   32-byte sha256 over everything above

MAGIC = b"CCTCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    spec: ArchitectureSpec | None
    params: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def restore_params(self, module: nn.Module) -> None:
        own = dict(module.named_parameters())
        if own.keys() != self.params.keys():
            missing = sorted(own.keys() ^ self.params.keys())
            raise InputError(f"checkpoint tensors do not match the model: {missing[:5]}")
        for name, p in own.items():
            src = self.params[name]
            if src.shape != p.shape:
                raise InputError(f"shape mismatch for {name}: checkpoint {tuple(src.shape)}, "
                                 f"model {tuple(p.shape)}")
        with torch.no_grad():
            for name, p in own.items():
                p.copy_(self.params[name])

    def build_model(self) -> CCT:
        if self.spec is None:
            raise ConfigurationError("checkpoint carries no architecture", "spec")
        model = CCT(self.spec, self.meta.get("seed") or 0)
        self.restore_params(model)
        trainable = self.meta.get("trainable")
        if trainable is not None:
            for n, p in model.named_parameters():
                p.requires_grad_(n in trainable)
        return model


def _pack_tensor(buf: io.BytesIO, name: str, t: torch.Tensor) -> None:
    t = t.detach().cpu().contiguous()
    raw_name = name.encode()
    buf.write(struct.pack("<H", len(raw_name)))
    buf.write(raw_name)
    buf.write(struct.pack("<BB", _DTYPES[t.dtype], t.dim()))
    buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
    arr = t.numpy()
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    spec_text = ckpt.spec.to_text() if ckpt.spec is not None else ""
    meta = dict(ckpt.meta, spec=spec_text)
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<I", ckpt.version))
    body.write(hashlib.sha256(spec_text.encode()).digest())
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    body.write(struct.pack("<I", len(meta_raw)))
    body.write(meta_raw)
    tensors = ([("param/" + n, t) for n, t in ckpt.params.items()]
               + [("exp_avg/" + n, t) for n, t in ckpt.exp_avg.items()]
               + [("exp_avg_sq/" + n, t) for n, t in ckpt.exp_avg_sq.items()])
    body.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        _pack_tensor(body, name, t)
    payload = body.getvalue()
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 64 or data[:len(MAGIC)] != MAGIC:
        raise ChecksumError(f"{path} is not a checkpoint file")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (file corrupt)")
    view = memoryview(payload)
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        out = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return out

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ChecksumError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    spec_digest = bytes(view[pos:pos + 32])
    pos += 32
    (meta_len,) = take("<I")
    meta = json.loads(bytes(view[pos:pos + meta_len]))
    pos += meta_len
    spec_text = meta.pop("spec")
    if hashlib.sha256(spec_text.encode()).digest() != spec_digest:
        raise ChecksumError(f"{path}: embedded architecture does not match its hash")
    spec = ArchitectureSpec.from_text(spec_text) if spec_text else None
    (count,) = take("<I")
    groups: dict[str, dict[str, torch.Tensor]] = {"param": {}, "exp_avg": {}, "exp_avg_sq": {}}
    for _ in range(count):
        (n,) = take("<H")
        name = bytes(view[pos:pos + n]).decode()
        pos += n
        code, ndim = take("<BB")
        shape = take(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES_INV[code]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=np_dtype).reshape(shape)
        pos += nbytes
        group, tname = name.split("/", 1)
        groups[group][tname] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))
    return Checkpoint(spec, groups["param"], groups["exp_avg"], groups["exp_avg_sq"], meta, version)
