"""Declarative description of a compact convolutional transformer (CCT) variant.

A CCT-n/kxc network has ``c`` convolutional layers (CLs) of ``k x k`` kernels
acting as a tokenizer, followed by ``n`` transformer encoder blocks and a
classifier head made of sequence pooling plus one fully connected layer.

Token count is derived from the tokenizer, not configured. Every CL keeps
the spatial size (stride 1, same padding); a CL listed in ``pool_after`` is
followed by a 3x3 max pool with stride 2 and padding 1, which maps a side
of ``S`` pixels to ``ceil(S / 2)``. With a 32x32 input and one pooled CL
this gives 16 x 16 = 256 tokens.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ConfigurationError

__all__ = [
    "ArchitectureSpec",
    "PRESETS",
    "get_preset",
    "layer_latency",
    "parameter_count",
    "load_spec",
]


@dataclass(frozen=True)
class ArchitectureSpec:
    num_conv_layers: int
    num_blocks: int
    dim: int
    heads_per_block: tuple[int, ...]
    num_labels: int
    conv_kernel: int = 3
    conv_channels: tuple[int, ...] | None = None
    pool_after: frozenset[int] = frozenset({1})
    ff_expansion: float = 2.0
    input_size: int = 32
    input_channels: int = 3
    name: str = ""

    def __post_init__(self):
        # normalise container types so equality and hashing are stable
        object.__setattr__(self, "heads_per_block", tuple(int(h) for h in self.heads_per_block))
        object.__setattr__(self, "pool_after", frozenset(int(i) for i in self.pool_after))
        if self.conv_channels is None:
            object.__setattr__(self, "conv_channels", (self.dim,) * self.num_conv_layers)
        else:
            object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        self.validate()

    def validate(self) -> None:
        if self.num_conv_layers < 1:
            raise ConfigurationError("must be >= 1", "num_conv_layers")
        if self.num_blocks < 0:
            raise ConfigurationError("must be >= 0", "num_blocks")
        if self.num_labels < 2:
            raise ConfigurationError("must be >= 2", "num_labels")
        if self.dim < 1:
            raise ConfigurationError("must be >= 1", "dim")
        if len(self.heads_per_block) != self.num_blocks:
            raise ConfigurationError(
                f"has {len(self.heads_per_block)} entries but num_blocks = {self.num_blocks}",
                "heads_per_block",
            )
        for i, h in enumerate(self.heads_per_block, start=1):
            if h < 1 or self.dim % h:
                raise ConfigurationError(
                    f"block {i}: dim {self.dim} is not divisible by H = {h}", "heads_per_block"
                )
        if len(self.conv_channels) != self.num_conv_layers:
            raise ConfigurationError(
                f"has {len(self.conv_channels)} entries but num_conv_layers = {self.num_conv_layers}",
                "conv_channels",
            )
        if any(c < 1 for c in self.conv_channels):
            raise ConfigurationError("entries must be >= 1", "conv_channels")
        if self.conv_channels[-1] != self.dim:
            raise ConfigurationError(
                f"last CL width {self.conv_channels[-1]} must equal dim {self.dim}", "conv_channels"
            )
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigurationError("must be a positive odd number", "conv_kernel")
        bad = [i for i in self.pool_after if not 1 <= i <= self.num_conv_layers]
        if bad:
            raise ConfigurationError(f"CL indices {sorted(bad)} out of range", "pool_after")
        if self.ff_expansion <= 0:
            raise ConfigurationError("must be > 0", "ff_expansion")
        if self.input_size < 1:
            raise ConfigurationError("must be >= 1", "input_size")
        if self.input_channels < 1:
            raise ConfigurationError("must be >= 1", "input_channels")

    # derived quantities

    def head_size(self, block: int) -> int:
        """Nodes per head in 1-based ``block``."""
        return self.dim // self.heads_per_block[block - 1]

    @property
    def ff_hidden(self) -> int:
        return int(round(self.dim * self.ff_expansion))

    @property
    def token_side(self) -> int:
        side = self.input_size
        for i in range(1, self.num_conv_layers + 1):
            if i in self.pool_after:
                side = math.ceil(side / 2)
        return side

    @property
    def num_tokens(self) -> int:
        return self.token_side ** 2

    # serialisation

    def to_text(self) -> str:
        """Render as ``key = value`` lines (one per field, fixed order)."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, frozenset):
                value = ",".join(str(v) for v in sorted(value))
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"unknown key on line {lineno}", key)
            raw[key] = value
        kwargs: dict[str, object] = {}
        for key, value in raw.items():
            try:
                if key in ("heads_per_block", "conv_channels"):
                    kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
                elif key == "pool_after":
                    kwargs[key] = frozenset(int(v) for v in value.split(",") if v.strip())
                elif key == "ff_expansion":
                    kwargs[key] = float(value)
                elif key == "name":
                    kwargs[key] = value
                else:
                    kwargs[key] = int(value)
            except ValueError as exc:
                raise ConfigurationError(f"cannot parse {value!r}", key) from exc
        missing = [k for k in ("num_conv_layers", "num_blocks", "dim", "heads_per_block", "num_labels")
                   if k not in kwargs]
        if missing:
            # heads_per_block may legitimately be empty when num_blocks = 0
            if missing == ["heads_per_block"] and kwargs.get("num_blocks") == 0:
                kwargs["heads_per_block"] = ()
            else:
                raise ConfigurationError("missing required key", missing[0])
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "ArchitectureSpec":
        return dataclasses.replace(self, **changes)


def layer_latency(spec: ArchitectureSpec) -> int:
    """Layer count on the critical path.

    Each transformer block contributes four layers (attention, projection
    and the two feedforward layers); the classifier adds one.
    """
    return spec.num_conv_layers + 4 * spec.num_blocks + 1


def parameter_count(spec: ArchitectureSpec) -> int:
    k2 = spec.conv_kernel ** 2
    total = 0
    in_ch = spec.input_channels
    for out_ch in spec.conv_channels:
        total += out_ch * in_ch * k2 + out_ch
        in_ch = out_ch
    d, f = spec.dim, spec.ff_hidden
    total += spec.num_tokens * d  # positional embedding
    per_block = (
        2 * d          # attention pre-norm
        + 3 * d * d    # Q, K, V
        + d * d + d    # projection
        + 2 * d        # feedforward pre-norm
        + d * f + f    # FF1
        + f * d + d    # FF2
    )
    total += spec.num_blocks * per_block
    total += 2 * d  # final norm
    total += d      # sequence-pooling score vector
    total += d * spec.num_labels + spec.num_labels
    return total


def _cct(name: str, convs: int, heads: Iterable[int], dim: int, labels: int = 100,
         size: int = 32, pool: Iterable[int] = (1,)) -> ArchitectureSpec:
    heads = tuple(heads)
    return ArchitectureSpec(
        num_conv_layers=convs, num_blocks=len(heads), dim=dim, heads_per_block=heads,
        num_labels=labels, input_size=size, pool_after=frozenset(pool), name=name,
    )


def _build_presets() -> dict[str, ArchitectureSpec]:
    presets = {
        "cct-7/3x1": _cct("cct-7/3x1", 1, [4] * 7, 256),
        "cct-2/3x5": _cct("cct-2/3x5", 5, [4] * 2, 256),
        "cct-2/3x2": _cct("cct-2/3x2", 2, [16] * 2, 512),
        "cct-1/3x1": _cct("cct-1/3x1", 1, [16], 256),
        "cct-1/3x2": _cct("cct-1/3x2", 2, [64], 1024),
    }
    for h7 in (4, 8, 16, 32):
        name = f"cct-7/3x1-h7={h7}"
        presets[name] = _cct(name, 1, [4] * 6 + [h7], 256)
    tiny = {}
    for name, spec in presets.items():
        if "h7=" in name:
            continue
        tname = f"{name}-tiny"
        tiny[tname] = _cct(tname, spec.num_conv_layers, [4] * spec.num_blocks, 32,
                           labels=10, size=16, pool=spec.pool_after)
    presets.update(tiny)
    presets["cct-3/3x1-tiny"] = _cct("cct-3/3x1-tiny", 1, [4] * 3, 32, labels=10, size=16)
    return presets


PRESETS: dict[str, ArchitectureSpec] = _build_presets()


def get_preset(name: str) -> ArchitectureSpec:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown architecture {name!r}; known: {', '.join(sorted(PRESETS))}", "arch"
        ) from None


def load_spec(name_or_path: str | Path) -> ArchitectureSpec:
    """Resolve a preset name or read a ``key = value`` spec file."""
    path = Path(name_or_path)
    if str(name_or_path).lower() in PRESETS:
        return PRESETS[str(name_or_path).lower()]
    if path.is_file():
        return ArchitectureSpec.from_text(path.read_text())
    return get_preset(str(name_or_path))
