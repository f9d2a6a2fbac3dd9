"""Conv/transformer hybrid block over stacked 2x2 patches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, ConvNormAct, LayerNorm, Linear, Module, Rng, Tensor
from .core import functional as F


@dataclass
class AssemFormerConfig:
    channels: int
    embed_dim: int | None = None
    patch: tuple[int, int] = (2, 2)
    heads: int = 4
    mlp_ratio: float = 2.0
    depth: int = 2

    def __post_init__(self):
        if self.embed_dim is None:
            self.embed_dim = self.channels
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.patch) < 1:
            raise ConfigurationError(f"patch must be positive, got {self.patch}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class PatchSequence:
    """Tokens shaped (N * ph * pw, tokens, D) plus what is needed to fold back."""

    tokens: Tensor
    batch: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    patch: tuple[int, int]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]


def stack(x: Tensor, patch=(2, 2)) -> PatchSequence:
    """Group pixels sharing an offset inside their patch into one token sequence.

    Sequence (a, b) holds pixel (a, b) of every patch, so attention runs
    between patches. Sides that do not divide the patch are zero padded.
    """
    ph, pw = patch
    n, d, h, w = x.shape
    hp, wp = -(-h // ph) * ph, -(-w // pw) * pw
    if (hp, wp) != (h, w):
        x = F.pad2d(x, (0, hp - h, 0, wp - w))
    gh, gw = hp // ph, wp // pw
    t = F.reshape(x, (n, d, gh, ph, gw, pw))
    t = F.transpose(t, (0, 3, 5, 2, 4, 1))
    t = F.reshape(t, (n * ph * pw, gh * gw, d))
    return PatchSequence(t, n, h, w, hp, wp, (ph, pw))


def unstack(seq: PatchSequence, tokens: Tensor | None = None) -> Tensor:
    t = seq.tokens if tokens is None else tokens
    ph, pw = seq.patch
    gh, gw = seq.padded_height // ph, seq.padded_width // pw
    d = t.shape[-1]
    t = F.reshape(t, (seq.batch, ph, pw, gh, gw, d))
    t = F.transpose(t, (0, 5, 3, 1, 4, 2))
    x = F.reshape(t, (seq.batch, d, seq.padded_height, seq.padded_width))
    if (seq.padded_height, seq.padded_width) != (seq.height, seq.width):
        x = x[:, :, : seq.height, : seq.width]
    return x


class MHSA(Module):
    def __init__(self, dim: int, heads: int, rng: Rng, keep_attention: bool = False):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng.stream("qkv"))
        self.proj = Linear(dim, dim, rng.stream("proj"))
        self.keep_attention = keep_attention
        self._attention: np.ndarray | None = None

    @property
    def attention(self) -> np.ndarray | None:
        return self._attention

    def forward(self, z: Tensor) -> Tensor:
        b, n, d = z.shape
        qkv = F.reshape(self.qkv(z), (b, n, 3, self.heads, self.head_dim))
        qkv = F.transpose(qkv, (2, 0, 3, 1, 4))             # (3, B, m, N, Dh)
        q = F.mul(qkv[0], 1.0 / math.sqrt(self.head_dim))
        k, v = qkv[1], qkv[2]
        attn = F.softmax(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), axis=-1)
        if self.keep_attention:
            self._attention = attn.data
        out = F.transpose(F.matmul(attn, v), (0, 2, 1, 3))  # (B, N, m, Dh)
        return self.proj(F.reshape(out, (b, n, d)))


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: Rng):
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.norm1 = LayerNorm(dim)
        self.attn = MHSA(dim, heads, rng.stream("attn"))
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng.stream("fc1"))
        self.fc2 = Linear(hidden, dim, rng.stream("fc2"))

    def forward(self, z: Tensor) -> Tensor:
        z = z + self.attn(self.norm1(z))
        return z + self.fc2(F.silu(self.fc1(self.norm2(z))))


class AssemFormer(Module):
    """Local convs, transformer blocks over stacked patches, skip-concat fusion.

    Output shape equals input shape.
    """

    def __init__(self, cfg: AssemFormerConfig, rng: Rng, act: str = "silu"):
        c, d = cfg.channels, cfg.embed_dim
        self.cfg = cfg
        self.local = ConvNormAct(c, c, 3, rng.stream("local"), act=act)
        self.embed = ConvNormAct(c, d, 1, rng.stream("embed"), act="identity", norm=False)
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.mlp_ratio, rng.stream(f"block{i}"))
                       for i in range(cfg.depth)]
        self.final_norm = LayerNorm(d)
        self.unembed = ConvNormAct(d, c, 1, rng.stream("unembed"), act=act)
        self.fuse = ConvNormAct(2 * c, c, 3, rng.stream("fuse"), act=act)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.channels:
            raise ConfigurationError(f"AssemFormer expects {self.cfg.channels} channels, got {x.shape[1]}")
        seq = stack(self.embed(self.local(x)), self.cfg.patch)
        z = seq.tokens
        for block in self.blocks:
            z = block(z)
        y = self.unembed(unstack(seq, self.final_norm(z)))
        return self.fuse(F.concat([x, y], axis=1))
