"""CCT network: convolutional tokenizer, pre-norm encoder blocks, sequence pooling.

Weights used in ``x @ W`` form are stored as ``(in, out)`` matrices, so the
attention projection's *rows* are indexed by the concatenated head columns.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .architecture import ArchitectureSpec
from .errors import ConfigurationError, InputError

__all__ = [
    "CCT",
    "ForwardTrace",
    "TransformerBlock",
    "attention_subblock",
    "sequence_pool",
    "build_model",
    "forward",
    "model_hash",
    "set_strict",
    "predict_logits",
]

Tap = Literal["post_block", "post_attention"]

INIT_STD = 0.02


def set_strict(enabled: bool = True) -> None:
    """Toggle bit-exact execution: deterministic kernels and a single thread."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def attention_subblock(
    tokens: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    w_proj: torch.Tensor,
    b_proj: torch.Tensor | None,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention followed by the FC projection.

    Returns ``(concat_heads, projected)`` and, if requested, the attention
    weights of shape ``(..., heads, T, T)``. Head ``h`` owns columns
    ``[h * dim / heads, (h + 1) * dim / heads)`` of ``concat_heads``.
    """
    *lead, t, dim = tokens.shape
    if dim % heads:
        raise InputError(f"dim {dim} not divisible by {heads} heads")
    hs = dim // heads

    def split(x):
        return x.reshape(*lead, t, heads, hs).transpose(-3, -2)

    q, k, v = split(tokens @ wq), split(tokens @ wk), split(tokens @ wv)
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(hs)
    weights = scores.softmax(dim=-1)
    concat = (weights @ v).transpose(-3, -2).reshape(*lead, t, dim)
    projected = concat @ w_proj
    if b_proj is not None:
        projected = projected + b_proj
    if return_weights:
        return concat, projected, weights
    return concat, projected


def sequence_pool(tokens: torch.Tensor, pool_weight: torch.Tensor,
                  return_weights: bool = False):
    """Softmax-weighted average of token rows; scores are ``tokens @ pool_weight``."""
    if tokens.shape[-2] == 0:
        raise InputError("sequence pooling needs at least one token")
    alpha = (tokens @ pool_weight).softmax(dim=-1)
    pooled = (alpha.unsqueeze(-2) @ tokens).squeeze(-2)
    if return_weights:
        return pooled, alpha
    return pooled


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_hidden: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.wq = nn.Parameter(torch.empty(dim, dim))
        self.wk = nn.Parameter(torch.empty(dim, dim))
        self.wv = nn.Parameter(torch.empty(dim, dim))
        self.w_proj = nn.Parameter(torch.empty(dim, dim))
        self.b_proj = nn.Parameter(torch.zeros(dim))
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_hidden)
        self.ff2 = nn.Linear(ff_hidden, dim)

    def attend(self, x: torch.Tensor, return_weights: bool = False):
        return attention_subblock(self.norm1(x), self.wq, self.wk, self.wv,
                                  self.w_proj, self.b_proj, self.heads, return_weights)

    def forward(self, x: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        if trace is not None:
            concat, projected, weights = self.attend(x, return_weights=True)
            trace["concat"], trace["attention"] = concat, weights
        else:
            concat, projected = self.attend(x)
        x = x + projected
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


@dataclass
class ForwardTrace:
    concat_heads: list[torch.Tensor] = field(default_factory=list)
    block_outputs: list[torch.Tensor] = field(default_factory=list)
    attention: list[torch.Tensor] = field(default_factory=list)
    logits: torch.Tensor | None = None


class CCT(nn.Module):
    """Learnable state of one CCT variant (the spec and init seed travel with it)."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.seed = seed
        k = spec.conv_kernel
        convs = []
        in_ch = spec.input_channels
        for out_ch in spec.conv_channels:
            convs.append(nn.Conv2d(in_ch, out_ch, k, stride=1, padding=k // 2))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.pos_embedding = nn.Parameter(torch.empty(1, spec.num_tokens, spec.dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.dim, h, spec.ff_hidden) for h in spec.heads_per_block
        )
        self.norm = nn.LayerNorm(spec.dim)
        self.pool_weight = nn.Parameter(torch.empty(spec.dim))
        self.classifier = nn.Linear(spec.dim, spec.num_labels)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias") or name == "b_proj" or name.endswith(".b_proj"):
                p.zero_()
            elif ".norm" in name or name.startswith("norm"):
                p.fill_(1.0)
            else:
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD,
                                      generator=gen)

    def tokenize(self, images: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        if images.dim() != 4 or images.shape[1:] != (spec.input_channels, spec.input_size,
                                                      spec.input_size):
            raise InputError(
                f"expected batch of shape (B, {spec.input_channels}, {spec.input_size}, "
                f"{spec.input_size}), got {tuple(images.shape)}"
            )
        x = images
        for i, conv in enumerate(self.convs, start=1):
            x = F.relu(conv(x))
            if i in spec.pool_after:
                x = F.max_pool2d(x, kernel_size=3, stride=2, padding=1)
        return x.flatten(2).transpose(1, 2) + self.pos_embedding

    def features(self, images: torch.Tensor, block: int, tap: Tap = "post_block") -> torch.Tensor:
        """Token activations at ``tap`` of 1-based ``block`` (``block=0``: tokenizer output)."""
        if not 0 <= block <= self.spec.num_blocks:
            raise ConfigurationError(f"block {block} outside 0..{self.spec.num_blocks}", "block")
        x = self.tokenize(images)
        for i, blk in enumerate(self.blocks, start=1):
            if i == block and tap == "post_attention":
                return blk.attend(x)[0]
            x = blk(x)
            if i == block:
                return x
        return x

    def head(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.classifier(sequence_pool(self.norm(tokens), self.pool_weight))

    def forward(self, images: torch.Tensor, trace: bool = False):
        x = self.tokenize(images)
        if not trace:
            for blk in self.blocks:
                x = blk(x)
            return self.head(x)
        tr = ForwardTrace()
        for blk in self.blocks:
            taps: dict = {}
            x = blk(x, trace=taps)
            tr.concat_heads.append(taps["concat"])
            tr.attention.append(taps["attention"])
            tr.block_outputs.append(x)
        tr.logits = self.head(x)
        return tr.logits, tr


def build_model(spec: ArchitectureSpec, seed: int = 0) -> CCT:
    return CCT(spec, seed)


def forward(model: CCT, batch: torch.Tensor, trace: bool = False):
    return model(batch, trace=trace)


def model_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def predict_logits(model: nn.Module, inputs: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = [model(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    model.train(was_training)
    if not out:
        return torch.empty(0)
    return torch.cat(out)
