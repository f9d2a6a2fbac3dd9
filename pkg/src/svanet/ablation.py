"""Named variant sets for ablation runs and their comparison tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import ConfigurationError
from .model import ModelConfig, build
from .presets import RunConfig, with_model
from .train import fit_multi

AXES = ("components", "attention", "pool_sizes", "assemformer", "fusion", "svattn")


def variants(axis: str, base: ModelConfig) -> list[tuple[str, dict]]:
    """(row label, ModelConfig changes) for every row of an axis."""
    if axis == "components":
        off = dict(bottleneck=False, attention_kind="none", guidance=False, svattn=False,
                   assemformer_place="none")
        return [
            ("baseline", off),
            ("+mcbottleneck", {**off, "bottleneck": True}),
            ("+mcattn", {**off, "bottleneck": True, "attention_kind": "mcattn"}),
            ("+guidance", {**off, "bottleneck": True, "attention_kind": "mcattn", "guidance": True}),
            ("+svattn", {**off, "bottleneck": True, "attention_kind": "mcattn", "guidance": True, "svattn": True}),
            ("+assemformer", {"bottleneck": True, "attention_kind": "mcattn", "guidance": True, "svattn": True,
                              "assemformer_place": base.assemformer_place if base.assemformer_place != "none"
                              else "after"}),
        ]
    if axis == "attention":
        return [(k, {"attention_kind": k}) for k in ("none", "se", "cbam", "coordattn", "mcattn")]
    if axis == "pool_sizes":
        return [("-".join(map(str, p)), {"pool_sizes": p}) for p in ((1, 2), (1, 2, 3), (2, 3), (1, 2, 3, 4))]
    if axis == "assemformer":
        return [(p, {"assemformer_place": p}) for p in ("before", "after", "both", "none")]
    if axis == "fusion":
        return [(f, {"fusion": f}) for f in ("none", "add", "concat")]
    if axis == "svattn":
        return [
            ("full", {"attention_kind": "mcattn", "guidance": True, "svattn": True}),
            ("no-svattn", {"attention_kind": "mcattn", "guidance": True, "svattn": False}),
            ("no-mcattn-no-svattn", {"attention_kind": "none", "guidance": True, "svattn": False}),
        ]
    raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {AXES}")


@dataclass
class AblationRow:
    name: str
    params: int
    changes: dict
    summary: dict | None = None

    def metric(self, bucket: str, name: str) -> float | None:
        if not self.summary:
            return None
        stats = self.summary["buckets"].get(bucket, {}).get(name)
        return None if stats is None else stats["mean"]


@dataclass
class AblationResult:
    axis: str
    rows: list[AblationRow] = field(default_factory=list)

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def table(self) -> str:
        width = max(len(r.name) for r in self.rows) + 2
        head = f"{self.axis:<{width}}{'params':>12}"
        buckets = ("UltraSmall", "Small", "All")
        for b in buckets:
            head += f"{b + ' mDice':>20}{b + ' sens':>19}"
        lines = [head]
        for r in self.rows:
            line = f"{r.name:<{width}}{r.params:>12,}"
            for b in buckets:
                for m, w in (("mdice", 20), ("sensitivity", 19)):
                    v = r.metric(b, m)
                    line += f"{'-':>{w}}" if v is None else f"{v:>{w}.4f}"
            lines.append(line)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": [{"name": r.name, "params": r.params, "changes": _jsonable(r.changes),
                                             "summary": r.summary} for r in self.rows]}


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def run_ablation(axis: str, cfg: RunConfig, train_set=None, test_set=None, out_dir=None,
                 progress=None) -> AblationResult:
    """Build (and, given datasets, train) every variant with identical seeds."""
    result = AblationResult(axis)
    for name, changes in variants(axis, cfg.model):
        vcfg = with_model(cfg, **changes)
        params = build(vcfg.model, 0).num_parameters()
        summary = None
        if train_set is not None:
            sub = Path(out_dir) / name if out_dir is not None else None
            _, summary = fit_multi(vcfg.model, vcfg.train, train_set, test_set, sub, test_set, progress)
        result.rows.append(AblationRow(name, params, changes, summary))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
        (Path(out_dir) / "ablation.txt").write_text(result.table() + "\n")
    return result
