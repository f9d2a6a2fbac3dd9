"""Channel attention gates.

``MCAttn`` and ``SvAttn`` are the two stochastic gates of the network; the
vanilla global gate and SE / CBAM / coordinate attention exist as reference
points for equivalence checks and the attention ablation.

Stochastic gates draw their selection from the ``rng`` passed to ``forward``
in training mode. In evaluation the ``expectation`` mode replaces the draw by
its mean so inference is deterministic; ``sampled`` keeps drawing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, Conv2d, GroupNorm, Module, Rng, Tensor
from .core import functional as F

EVAL_MODES = ("expectation", "sampled")


@dataclass
class GlobalAttentionConfig:
    r: int = 1
    n: int | None = None
    sigma: float | None = None


@dataclass
class McAttnConfig:
    channels: int
    pool_sizes: tuple[int, ...] = (1, 2, 3)
    reduction: int = 4
    eval_mode: str = "expectation"

    def __post_init__(self):
        self.pool_sizes = tuple(int(i) for i in self.pool_sizes)
        if not self.pool_sizes:
            raise ConfigurationError("pool_sizes must be non-empty")
        if any(i < 1 for i in self.pool_sizes) or list(self.pool_sizes) != sorted(set(self.pool_sizes)):
            raise ConfigurationError(f"pool_sizes must be strictly increasing and >= 1: {self.pool_sizes}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigurationError(f"eval_mode must be one of {EVAL_MODES}")


def subregion_count(input_hw: tuple[int, int], target_stage: int) -> int:
    """Number of SvAttn subregions: larger input side over 2^(t+1), at least 1."""
    side = max(input_hw)
    return max(1, int(round(side / 2 ** (target_stage + 1))))


@dataclass
class SvAttnConfig:
    target_stage: int
    target_channels: int
    input_hw: tuple[int, int]
    source_channels: tuple[int, ...] = field(default_factory=tuple)
    reduction: int = 4
    eval_mode: str = "expectation"

    def __post_init__(self):
        if self.target_stage < 2:
            raise ConfigurationError(f"SvAttn target stage must be >= 2, got {self.target_stage}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigurationError(f"eval_mode must be one of {EVAL_MODES}")

    @property
    def num_sources(self) -> int:
        return self.target_stage - 1

    @property
    def n(self) -> int:
        return subregion_count(self.input_hw, self.target_stage)

    @property
    def grid(self) -> int:
        return max(1, int(round(math.sqrt(self.n))))


class Excitation(Module):
    """Squeeze-excitation MLP as two 1x1 convs: C -> C/r -> C."""

    def __init__(self, channels: int, reduction: int, rng: Rng):
        hidden = max(1, channels // reduction)
        self.reduce = Conv2d(channels, hidden, 1, rng.stream("reduce"))
        self.expand = Conv2d(hidden, channels, 1, rng.stream("expand"))

    def forward(self, x: Tensor) -> Tensor:
        return self.expand(F.relu(self.reduce(x)))


def apply_gate(y: Tensor, gate: Tensor) -> Tensor:
    """Broadcast a (N, C, 1, 1) gate over a (N, C, H, W) map."""
    if gate.ndim != 4 or gate.shape[2:] != (1, 1):
        raise ConfigurationError(f"gate must have shape (N, C, 1, 1), got {gate.shape}")
    if gate.shape[1] != y.shape[1]:
        raise ConfigurationError(f"gate channels {gate.shape[1]} != feature channels {y.shape[1]}")
    return F.mul(y, gate)


def vanilla_global_attention(x: Tensor, excite: Excitation,
                             cfg: GlobalAttentionConfig | None = None) -> Tensor:
    """Gate from the normalized sum of r x r subregions.

    With the defaults (r=1, n=sigma=H*W) every subregion is a pixel and the
    normalized sum is the spatial mean.
    """
    cfg = cfg or GlobalAttentionConfig()
    h, w = x.shape[2:]
    n = cfg.n if cfg.n is not None else h * w
    sigma = cfg.sigma if cfg.sigma is not None else h * w
    if cfg.r == 1 and n == h * w and sigma == h * w:
        pooled = F.adaptive_avg_pool2d(x, 1, 1)
    else:
        g = max(1, min(h, w, int(round(math.sqrt(n)))))
        cells = F.adaptive_avg_pool2d(x, g, g)
        pooled = F.mul(F.sum(cells, axis=(2, 3), keepdims=True), 1.0 / sigma)
    return F.sigmoid(excite(pooled))


class MCAttn(Module):
    """Monte Carlo attention: SE-shaped gate over a randomly drawn pooled size.

    Training draws one pool size i per forward pass (a one-hot selector), runs
    pool(i x i) -> excitation -> pool(1 x 1) and squashes with a sigmoid.
    """

    def __init__(self, cfg: McAttnConfig, rng: Rng):
        self.cfg = cfg
        self.excite = Excitation(cfg.channels, cfg.reduction, rng)
        self._clamped = 0
        self._last_choice: int | None = None

    @property
    def clamp_count(self) -> int:
        return self._clamped

    @property
    def last_choice(self) -> int | None:
        return self._last_choice

    def _logits(self, x: Tensor, size: int) -> Tensor:
        h, w = x.shape[2:]
        if size > min(h, w):
            self._clamped += 1
        ph, pw = min(size, h), min(size, w)
        a = self.excite(F.adaptive_avg_pool2d(x, ph, pw))
        return F.adaptive_avg_pool2d(a, 1, 1)

    def draw(self, rng: Rng) -> int:
        return self.cfg.pool_sizes[int(rng.integers(0, len(self.cfg.pool_sizes)))]

    def forward(self, x: Tensor, rng: Rng | None = None, training: bool = False,
                force_size: int | None = None) -> Tensor:
        if x.shape[1] != self.cfg.channels:
            raise ConfigurationError(f"MCAttn expects {self.cfg.channels} channels, got {x.shape[1]}")
        if force_size is not None:
            self._last_choice = force_size
            return F.sigmoid(self._logits(x, force_size))
        if training or self.cfg.eval_mode == "sampled":
            if rng is None:
                raise ConfigurationError("MCAttn needs an rng when sampling")
            size = self.draw(rng)
            self._last_choice = size
            return F.sigmoid(self._logits(x, size))
        self._last_choice = None
        logits = [self._logits(x, i) for i in self.cfg.pool_sizes]
        total = logits[0]
        for extra in logits[1:]:
            total = total + extra
        return F.sigmoid(F.mul(total, 1.0 / len(logits)))

    def apply(self, y: Tensor, rng: Rng | None = None, training: bool = False) -> Tensor:
        return apply_gate(y, self.forward(y, rng, training))


class SvAttn(Module):
    """Scale-variant attention over aligned cross-scale sources.

    Every source is pooled to a g x g grid of subregions. Each cell takes its
    value from one source stage chosen uniformly at random; the cell sum
    divided by the subregion count n feeds an excitation and a sigmoid.
    """

    def __init__(self, cfg: SvAttnConfig, rng: Rng):
        self.cfg = cfg
        self.excite = Excitation(cfg.target_channels, cfg.reduction, rng)
        self._last_choice: np.ndarray | None = None

    @property
    def last_choice(self) -> np.ndarray | None:
        return self._last_choice

    def draw(self, rng: Rng, grid: int, k: int) -> np.ndarray:
        return np.asarray(rng.integers(0, k, size=(grid, grid)))

    def forward(self, sources: list[Tensor], rng: Rng | None = None, training: bool = False) -> Tensor:
        if not sources:
            raise ConfigurationError("SvAttn needs at least one source")
        shape = sources[0].shape
        for s in sources[1:]:
            if s.shape != shape:
                raise ConfigurationError(f"SvAttn source shapes differ: {s.shape} vs {shape}")
        if shape[1] != self.cfg.target_channels:
            raise ConfigurationError(f"SvAttn expects {self.cfg.target_channels} channels, got {shape[1]}")
        h, w = shape[2:]
        g = min(self.cfg.grid, h, w)
        n = self.cfg.n
        pooled = [F.adaptive_avg_pool2d(s, g, g) for s in sources]
        k = len(pooled)

        if training or self.cfg.eval_mode == "sampled":
            if rng is None:
                raise ConfigurationError("SvAttn needs an rng when sampling")
            choice = self.draw(rng, g, k)
            self._last_choice = choice
            dtype = pooled[0].dtype
            mixed = None
            for s, p in enumerate(pooled):
                mask = (choice == s).astype(dtype).reshape(1, 1, g, g)
                term = F.mul(p, mask)
                mixed = term if mixed is None else mixed + term
        else:
            self._last_choice = None
            mixed = pooled[0]
            for p in pooled[1:]:
                mixed = mixed + p
            if k > 1:
                mixed = F.mul(mixed, 1.0 / k)

        region_sum = F.sum(mixed, axis=(2, 3), keepdims=True)
        return F.sigmoid(self.excite(F.mul(region_sum, 1.0 / n)))


# --------------------------------------------------------------------------
# baseline gates for the attention ablation
# --------------------------------------------------------------------------

class SE(Module):
    def __init__(self, channels: int, reduction: int, rng: Rng):
        self.excite = Excitation(channels, reduction, rng)

    def gate(self, x: Tensor) -> Tensor:
        return F.sigmoid(self.excite(F.adaptive_avg_pool2d(x, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return apply_gate(x, self.gate(x))

    def apply(self, y: Tensor, rng: Rng | None = None, training: bool = False) -> Tensor:
        return self.forward(y)


class CBAM(Module):
    """Channel gate (shared MLP over avg and max pools) then a 7x7 spatial gate."""

    def __init__(self, channels: int, reduction: int, rng: Rng, spatial_kernel: int = 7):
        self.excite = Excitation(channels, reduction, rng.stream("channel"))
        self.spatial = Conv2d(2, 1, spatial_kernel, rng.stream("spatial"))

    def channel_gate(self, x: Tensor) -> Tensor:
        avg = self.excite(F.adaptive_avg_pool2d(x, 1, 1))
        mx = self.excite(F.amax(x, axis=(2, 3), keepdims=True))
        return F.sigmoid(avg + mx)

    def spatial_gate(self, x: Tensor) -> Tensor:
        desc = F.concat([F.mean(x, axis=1, keepdims=True), F.amax(x, axis=1, keepdims=True)], axis=1)
        return F.sigmoid(self.spatial(desc))

    def forward(self, x: Tensor) -> Tensor:
        y = apply_gate(x, self.channel_gate(x))
        return F.mul(y, self.spatial_gate(y))

    def apply(self, y: Tensor, rng: Rng | None = None, training: bool = False) -> Tensor:
        return self.forward(y)


class CoordAttn(Module):
    """Coordinate attention: height/width strip pools, shared conv, split gates."""

    def __init__(self, channels: int, reduction: int, rng: Rng):
        mid = max(8, channels // reduction)
        self.shared = Conv2d(channels, mid, 1, rng.stream("shared"))
        self.norm = GroupNorm(mid)
        self.conv_h = Conv2d(mid, channels, 1, rng.stream("h"))
        self.conv_w = Conv2d(mid, channels, 1, rng.stream("w"))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        strip_h = F.adaptive_avg_pool2d(x, h, 1)                                  # (N,C,H,1)
        strip_w = F.transpose(F.adaptive_avg_pool2d(x, 1, w), (0, 1, 3, 2))       # (N,C,W,1)
        y = F.silu(self.norm(self.shared(F.concat([strip_h, strip_w], axis=2))))
        y_h = y[:, :, :h, :]
        y_w = F.transpose(y[:, :, h:, :], (0, 1, 3, 2))
        a_h = F.sigmoid(self.conv_h(y_h))
        a_w = F.sigmoid(self.conv_w(y_w))
        return F.mul(F.mul(x, a_h), a_w)

    def apply(self, y: Tensor, rng: Rng | None = None, training: bool = False) -> Tensor:
        return self.forward(y)


ATTENTION_KINDS = ("mcattn", "se", "cbam", "coordattn", "none")


def build_attention(kind: str, channels: int, rng: Rng, pool_sizes=(1, 2, 3), reduction: int = 4,
                    eval_mode: str = "expectation") -> Module | None:
    if kind == "mcattn":
        return MCAttn(McAttnConfig(channels, tuple(pool_sizes), reduction, eval_mode), rng)
    if kind == "se":
        return SE(channels, reduction, rng)
    if kind == "cbam":
        return CBAM(channels, reduction, rng)
    if kind == "coordattn":
        return CoordAttn(channels, reduction, rng)
    if kind == "none":
        return None
    raise ConfigurationError(f"unknown attention kind {kind!r}; expected one of {ATTENTION_KINDS}")

