"""Encoder-decoder assembly, parameter/MAC accounting and checkpoints."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_text
from .assemformer import AssemFormer, AssemFormerConfig
from .attention import ATTENTION_KINDS, EVAL_MODES
from .blocks import ASPP, FUSIONS, ConvDown, CrossScaleGuidance, MCBottleneck, StageConfig, TConvUp
from .core import ConfigurationError, Conv2d, ConvNormAct, Module, Rng, Tensor, count_macs, meta_mode
from .core.tensor import meta_array

CHECKPOINT_VERSION = 1
PLACEMENTS = ("before", "after", "both", "none")
BASE_CHANNELS = (64, 64, 128, 256, 512)


@dataclass
class ModelConfig:
    num_classes: int = 2
    width_multiplier: float = 1.0
    base_channels: tuple[int, ...] = BASE_CHANNELS
    bottleneck: bool = True
    attention_kind: str = "mcattn"
    pool_sizes: tuple[int, ...] = (1, 2, 3)
    reduction: int = 4
    guidance: bool = True
    svattn: bool = True
    fusion: str = "concat"
    guidance_stages: tuple[int, ...] = (2, 3, 4, 5)
    assemformer_stages: tuple[int, ...] = (1, 2, 3, 4)
    assemformer_place: str = "after"
    heads: int = 4
    mlp_ratio: float = 2.0
    patch: int = 2
    aspp_channels: int | None = None
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    decoder_skips: bool = False
    eval_mode: str = "expectation"
    act: str = "silu"
    # SvAttn subregion counts follow the actual input; this only seeds the config
    input_hw: tuple[int, int] = (512, 512)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.base_channels) != 5:
            raise ConfigurationError("exactly five stage widths are required")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigurationError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}")
        if self.assemformer_place not in PLACEMENTS:
            raise ConfigurationError(f"assemformer_place must be one of {PLACEMENTS}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigurationError(f"eval_mode must be one of {EVAL_MODES}")
        if any(t not in (2, 3, 4, 5) for t in self.guidance_stages):
            raise ConfigurationError(f"guidance stages must lie in 2..5: {self.guidance_stages}")
        if any(t not in (1, 2, 3, 4) for t in self.assemformer_stages):
            raise ConfigurationError(f"AssemFormer stages must lie in 1..4: {self.assemformer_stages}")
        if self.width_multiplier <= 0:
            raise ConfigurationError("width_multiplier must be positive")
        for i, c in enumerate(self.stage_channels, 1):
            if c % self.heads and i in self.assemformer_stages:
                raise ConfigurationError(f"stage {i}: width {c} not divisible by {self.heads} heads")

    @property
    def stage_channels(self) -> list[int]:
        """Stage widths scaled by the multiplier, rounded to multiples of 4."""
        return [max(4, int(round(c * self.width_multiplier / 4)) * 4) for c in self.base_channels]

    @property
    def aspp_out(self) -> int:
        return self.aspp_channels if self.aspp_channels is not None else self.stage_channels[4] // 2

    def stage_configs(self) -> list[StageConfig]:
        chans = self.stage_channels
        out = []
        for t in range(1, 6):
            sources = list(range(1, t)) if self.guidance and t in self.guidance_stages else []
            out.append(StageConfig(t, chans[max(t - 2, 0)], chans[t - 1], downsample=t > 1,
                                   use_assemformer=self.assemformer_place != "none" and t in self.assemformer_stages,
                                   cross_scale_sources=sources))
        return out


class Stage(Module):
    """Optional down conv, MCBottleneck, cross-scale fusion and AssemFormer(s)."""

    def __init__(self, sc: StageConfig, cfg: ModelConfig, rng: Rng):
        self.index = sc.index
        c = sc.out_channels
        self.down = ConvDown(sc.in_channels, c, rng.stream("down"), act=cfg.act) if sc.downsample else None
        if cfg.bottleneck:
            self.bottleneck = MCBottleneck(c, rng.stream("bottleneck"), cfg.attention_kind, cfg.pool_sizes,
                                           cfg.reduction, cfg.eval_mode, cfg.act)
        else:
            self.bottleneck = ConvNormAct(c, c, 3, rng.stream("bottleneck"), act=cfg.act)
        self.guidance = None
        if sc.cross_scale_sources:
            self.guidance = CrossScaleGuidance(sc.index, cfg.stage_channels, rng.stream("guidance"),
                                               cfg.input_hw, cfg.svattn, cfg.fusion, cfg.reduction,
                                               cfg.eval_mode, cfg.act)
        af_cfg = AssemFormerConfig(c, c, (cfg.patch, cfg.patch), cfg.heads, cfg.mlp_ratio)
        place = cfg.assemformer_place if sc.use_assemformer else "none"
        # without a fusion point the two placements coincide
        if self.guidance is None and place == "both":
            place = "after"
        self.assemformer_before = AssemFormer(af_cfg, rng.stream("af_before"), cfg.act) \
            if place in ("before", "both") else None
        self.assemformer_after = AssemFormer(af_cfg, rng.stream("af_after"), cfg.act) \
            if place in ("after", "both") else None

    def forward(self, x: Tensor, previous: list[Tensor], rng: Rng | None, training: bool,
                input_hw, taps: dict | None) -> Tensor:
        if self.down is not None:
            x = self.down(x)
        if isinstance(self.bottleneck, MCBottleneck):
            y = self.bottleneck(x, _child(rng, self.bottleneck), training)
        else:
            y = self.bottleneck(x)
        _tap(taps, f"stage{self.index}.mcbottleneck", y)
        if self.assemformer_before is not None:
            y = self.assemformer_before(y)
        if self.guidance is not None:
            guided = self.guidance.guide(previous, _child(rng, self.guidance), training, input_hw)
            _tap(taps, f"stage{self.index}.guidance", guided)
            y = self.guidance.merge(y, guided)
        if self.assemformer_after is not None:
            y = self.assemformer_after(y)
        if self.assemformer_before is not None or self.assemformer_after is not None:
            _tap(taps, f"stage{self.index}.assemformer", y)
        _tap(taps, f"stage{self.index}", y)
        return y


def _child(rng: Rng | None, module: Module) -> Rng | None:
    return None if rng is None else rng.stream(module._path)


def _tap(taps: dict | None, name: str, value: Tensor) -> None:
    if taps is not None:
        taps[name] = value


class SvANet(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        chans = cfg.stage_channels
        init = rng.stream("init")
        self.stem = ConvDown(3, chans[0], init.stream("stem"), act=cfg.act)
        self.stages = [Stage(sc, cfg, init.stream(f"stage{sc.index}")) for sc in cfg.stage_configs()]
        self.aspp = ASPP(chans[4], cfg.aspp_out, init.stream("aspp"), cfg.aspp_rates, cfg.act)
        widths = [cfg.aspp_out, chans[3], chans[2], chans[1], chans[0], chans[0]]
        self.decoder = [TConvUp(widths[i], widths[i + 1], init.stream(f"up{i + 1}"), act=cfg.act)
                        for i in range(5)]
        self.head = Conv2d(chans[0], cfg.num_classes, 1, init.stream("head"))
        self.assign_paths()

    def tap_names(self) -> list[str]:
        names = ["stem"]
        for stage in self.stages:
            t = stage.index
            names += [f"stage{t}.mcbottleneck"]
            if stage.guidance is not None:
                names.append(f"stage{t}.guidance")
            if stage.assemformer_before is not None or stage.assemformer_after is not None:
                names.append(f"stage{t}.assemformer")
            names.append(f"stage{t}")
        names.append("aspp")
        names += [f"decoder{i}" for i in range(1, 6)]
        return names

    def forward(self, x: Tensor, rng: Rng | None = None, training: bool = False,
                taps: dict | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigurationError(f"expected input of shape (N, 3, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ConfigurationError(f"input {h}x{w} must be divisible by 32; crop or pad it first")
        y = self.stem(x)
        _tap(taps, "stem", y)
        outputs: list[Tensor] = []
        for stage in self.stages:
            y = stage(y, outputs, rng, training, (h, w), taps)
            outputs.append(y)
        y = self.aspp(y)
        _tap(taps, "aspp", y)
        for i, up in enumerate(self.decoder):
            y = up(y)
            if self.cfg.decoder_skips and i < 4:
                y = y + outputs[3 - i]
            _tap(taps, f"decoder{i + 1}", y)
        return self.head(y)


def build(cfg: ModelConfig, seed: int = 0) -> SvANet:
    return SvANet(cfg, Rng(seed, "model"))


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------

@dataclass
class ParamReport:
    params: int
    macs: int
    input_hw: tuple[int, int]
    params_by_module: dict[str, int] = field(default_factory=dict)
    macs_by_module: dict[str, int] = field(default_factory=dict)

    def table(self) -> str:
        keys = list(dict.fromkeys([*self.params_by_module, *self.macs_by_module]))
        width = max([len(k) for k in keys] + [6])
        lines = [f"{'module':<{width}}  {'params':>12}  {'MACs':>16}"]
        for k in keys:
            lines.append(f"{k:<{width}}  {self.params_by_module.get(k, 0):>12,}  {self.macs_by_module.get(k, 0):>16,}")
        lines.append(f"{'total':<{width}}  {self.params:>12,}  {self.macs:>16,}")
        return "\n".join(lines)


_GROUP = re.compile(r"^([^.]+(?:\.\d+)?)")


def _group(path: str) -> str:
    m = _GROUP.match(path)
    return m.group(1) if m else "(root)"


def count_params_macs(model: Module, input_hw=(512, 512), batch: int = 1) -> ParamReport:
    """Exact parameter count and MACs of one forward pass, by top-level module.

    Runs the network in shape-only mode so full-width 512x512 inputs are cheap.
    Sampled and expectation paths run the same convs except MCAttn, which in
    expectation visits every pool size; MACs are reported for that eval path.
    """
    params_by: dict[str, int] = {}
    for name, p in model.named_parameters():
        params_by[_group(name)] = params_by.get(_group(name), 0) + int(p.size)
    macs_by: dict[str, int] = {}
    if isinstance(model, SvANet):
        with meta_mode(), count_macs() as counter:
            model(Tensor(meta_array((batch, 3, *input_hw), np.float32)))
        for path, n in counter.by_scope.items():
            macs_by[_group(path)] = macs_by.get(_group(path), 0) + n
    return ParamReport(sum(params_by.values()), sum(macs_by.values()), tuple(input_hw), params_by, macs_by)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, model: SvANet, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    meta = {"version": np.asarray(CHECKPOINT_VERSION),
            "config": np.asarray(config_text.to_text(model.cfg))}
    for k, v in (extra or {}).items():
        meta[f"extra/{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **meta, **arrays)
    return path


def load_checkpoint(path) -> tuple[SvANet, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "version" not in data or int(data["version"]) != CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version")
        cfg = config_text.from_text(ModelConfig, str(data["config"]))
        state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        extra = {k[len("extra/"):]: data[k] for k in data.files if k.startswith("extra/")}
    model = build(cfg)
    model.load_state_dict(state)
    return model, extra
