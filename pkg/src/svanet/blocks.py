"""Composite blocks: strided down/up convs, MCBottleneck, cross-scale guidance, ASPP."""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import SvAttn, SvAttnConfig, apply_gate, build_attention
from .core import ConfigurationError, ConvNormAct, ConvTranspose2d, GroupNorm, Module, Rng, Tensor
from .core import functional as F

FUSIONS = ("concat", "add", "none")


@dataclass
class StageConfig:
    index: int
    in_channels: int
    out_channels: int
    downsample: bool = True
    use_assemformer: bool = True
    cross_scale_sources: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.index == 5 and self.use_assemformer:
            raise ConfigurationError("stage 5 feeds ASPP directly and carries no AssemFormer")


class ConvDown(Module):
    """3x3 stride-2 conv -> norm -> activation; halves even spatial sizes."""

    def __init__(self, in_c: int, out_c: int, rng: Rng, act: str = "silu"):
        self.block = ConvNormAct(in_c, out_c, 3, rng, stride=2, act=act)

    def forward(self, x: Tensor) -> Tensor:
        if min(x.shape[2:]) < 2:
            raise ConfigurationError(f"conv_down needs spatial size >= 2, got {x.shape[2:]}")
        return self.block(x)


class TConvUp(Module):
    """1x1 conv, 3x3 stride-2 transposed conv, 1x1 conv; doubles spatial size.

    The first two units end in norm + activation, the last in norm only.
    """

    def __init__(self, in_c: int, out_c: int, rng: Rng, mid_c: int | None = None, act: str = "silu"):
        mid_c = in_c if mid_c is None else mid_c
        self.reduce = ConvNormAct(in_c, mid_c, 1, rng.stream("reduce"), act=act)
        self.up = ConvTranspose2d(mid_c, mid_c, 3, rng.stream("up"), stride=2, padding=1, output_padding=1)
        self.up_norm = GroupNorm(mid_c)
        self.project = ConvNormAct(mid_c, out_c, 1, rng.stream("project"), act="identity")
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.reduce(x)
        y = F.ACTIVATIONS[self.act](self.up_norm(self.up(y)))
        return self.project(y)


class MCBottleneck(Module):
    """Residual bottleneck (reduce -> 3x3 -> expand) with a gate before the add."""

    def __init__(self, channels: int, rng: Rng, attention: str = "mcattn", pool_sizes=(1, 2, 3),
                 reduction: int = 4, eval_mode: str = "expectation", act: str = "silu",
                 zero_init_last: bool = False):
        self.channels = channels
        self.mid = -(-channels // 4)
        self.reduce = ConvNormAct(channels, self.mid, 1, rng.stream("reduce"), act=act)
        self.conv = ConvNormAct(self.mid, self.mid, 3, rng.stream("conv"), act=act)
        self.expand = ConvNormAct(self.mid, channels, 1, rng.stream("expand"), act="identity")
        if zero_init_last:
            self.expand.conv.weight.data[...] = 0
        self.attention_kind = attention
        self.gate = build_attention(attention, channels, rng.stream("gate"), pool_sizes, reduction, eval_mode)
        self.act = act

    def forward(self, x: Tensor, rng: Rng | None = None, training: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"MCBottleneck expects {self.channels} channels, got {x.shape[1]}")
        y = self.expand(self.conv(self.reduce(x)))
        if self.gate is not None:
            y = self.gate.apply(y, rng, training)
        return F.ACTIVATIONS[self.act](x + y)


@dataclass
class GuidanceBundle:
    target_stage: int
    aligned: list[Tensor]


class CrossScaleGuidance(Module):
    """Project stages 1..t-1 onto stage t and sum them, optionally gated by SvAttn.

    Source s crosses (t - s) strided convs, stepping through the intermediate
    stage widths so the last conv lands on C_t. The gated sum is then merged
    with the stage's bottleneck output by concat + 1x1 conv, plain addition,
    or not at all.
    """

    def __init__(self, target_stage: int, stage_channels: list[int], rng: Rng, input_hw=(512, 512),
                 use_svattn: bool = True, fusion: str = "concat", reduction: int = 4,
                 eval_mode: str = "expectation", act: str = "silu"):
        if target_stage < 2:
            raise ConfigurationError(f"cross-scale guidance needs target stage >= 2, got {target_stage}")
        if fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        self.t = target_stage
        c_t = stage_channels[target_stage - 1]
        self.paths = []
        for s in range(1, target_stage):
            path = []
            for hop in range(s, target_stage):
                path.append(ConvDown(stage_channels[hop - 1], stage_channels[hop],
                                     rng.stream(f"path{s}.hop{hop}"), act=act))
            self.paths.append(path)
        self.svattn = None
        if use_svattn:
            cfg = SvAttnConfig(target_stage, c_t, tuple(input_hw), tuple(stage_channels[: target_stage - 1]),
                               reduction, eval_mode)
            self.svattn = SvAttn(cfg, rng.stream("svattn"))
        self.fusion = fusion
        self.fuse = ConvNormAct(2 * c_t, c_t, 1, rng.stream("fuse"), act=act) if fusion == "concat" else None

    def align(self, stage_outputs: list[Tensor]) -> GuidanceBundle:
        if len(stage_outputs) < self.t - 1:
            raise ConfigurationError(f"target stage {self.t} needs {self.t - 1} source stages, got {len(stage_outputs)}")
        aligned = []
        for s, path in enumerate(self.paths):
            y = stage_outputs[s]
            for hop in path:
                y = hop(y)
            aligned.append(y)
        return GuidanceBundle(self.t, aligned)

    def guide(self, stage_outputs: list[Tensor], rng: Rng | None = None, training: bool = False,
              input_hw: tuple[int, int] | None = None) -> Tensor:
        """The (optionally SvAttn-gated) sum of aligned sources."""
        bundle = self.align(stage_outputs)
        y = bundle.aligned[0]
        for extra in bundle.aligned[1:]:
            y = y + extra
        if self.svattn is not None:
            if input_hw is not None:
                self.svattn.cfg.input_hw = tuple(input_hw)
            y = apply_gate(y, self.svattn(bundle.aligned, rng, training))
        return y

    def merge(self, features: Tensor, guided: Tensor) -> Tensor:
        if self.fusion == "concat":
            return self.fuse(F.concat([features, guided], axis=1))
        if self.fusion == "add":
            return features + guided
        return features

    def forward(self, features: Tensor, stage_outputs: list[Tensor], rng: Rng | None = None,
                training: bool = False, input_hw=None) -> Tensor:
        return self.merge(features, self.guide(stage_outputs, rng, training, input_hw))


class ASPP(Module):
    """Atrous spatial pyramid pooling: five parallel branches fused by a 1x1 conv."""

    def __init__(self, in_c: int, out_c: int, rng: Rng, rates=(6, 12, 18), act: str = "silu"):
        self.rates = tuple(rates)
        self.branches = [ConvNormAct(in_c, out_c, 1, rng.stream("b0"), act=act)]
        for i, r in enumerate(self.rates):
            self.branches.append(ConvNormAct(in_c, out_c, 3, rng.stream(f"b{i + 1}"), dilation=r, act=act))
        self.branches.append(ConvNormAct(in_c, out_c, 1, rng.stream("pool"), act=act, norm=False))
        self.project = ConvNormAct(out_c * len(self.branches), out_c, 1, rng.stream("project"), act=act)
        self._dilation_warnings = 0

    @property
    def dilation_warnings(self) -> int:
        return self._dilation_warnings

    def effective_rates(self, h: int, w: int) -> list[int]:
        limit = max(1, min(h, w) - 1)
        return [min(r, limit) for r in self.rates]

    def forward(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        rates = self.effective_rates(h, w)
        self._dilation_warnings += sum(r != rr for r, rr in zip(self.rates, rates))
        outs = [self.branches[0](x)]
        for branch, r in zip(self.branches[1:-1], rates):
            outs.append(branch(x, dilation=r))
        pooled = self.branches[-1](F.adaptive_avg_pool2d(x, 1, 1))
        outs.append(F.broadcast_to(pooled, (n, pooled.shape[1], h, w)))
        return self.project(F.concat(outs, axis=1))

