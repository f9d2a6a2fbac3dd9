"""Loss, optimizer, learning-rate schedule and the seeded training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigurationError, Parameter, Rng, Tensor, no_grad
from .core import functional as F
from .data.augment import AugmentConfig
from .data.dataset import iterate_batches
from .metrics import METRICS, StratifiedReport, stratified_eval
from .model import ModelConfig, SvANet, build, save_checkpoint


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    return F.cross_entropy(logits, target)


def cosine_lr(t: float, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        raise ConfigurationError("cosine schedule needs total > 0")
    if not 0 <= t <= total:
        raise ConfigurationError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / total))


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class AdamW:
    """Adam with weight decay applied to the parameters, not the gradients."""

    def __init__(self, params: list[Parameter], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = tuple(betas), eps, weight_decay
        self.state = AdamWState(0, [np.zeros_like(p.data) for p in self.params],
                                [np.zeros_like(p.data) for p in self.params])

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        c1, c2 = 1 - b1 ** st.step, 1 - b2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            if self.weight_decay:
                p.data *= 1 - lr * self.weight_decay
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    crop: int = 512
    lr_max: float = 5e-5
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.lr_min < self.lr_max:
            raise ConfigurationError("lr_min must be below lr_max")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")


@dataclass
class RunLog:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    final: dict | None = None
    status: str = "ok"
    model: SvANet | None = field(default=None, repr=False, compare=False)

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"kind": "epoch", "seed": self.seed, **e}, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"kind": "final", "seed": self.seed, "status": self.status,
                                 "report": self.final}, sort_keys=True))
        return lines

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.to_lines()) + "\n")
        return path

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def predict(model: SvANet, images: np.ndarray, batch_size: int = 4, rng: Rng | None = None) -> np.ndarray:
    """Class probabilities (N, K, H, W) in evaluation mode."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(np.ascontiguousarray(images[start:start + batch_size], dtype=np.float32))
            logits = model(x, rng, training=False).data.astype(np.float64)
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def evaluate_dataset(model: SvANet, dataset, batch_size: int = 4, crop: int | None = None) -> StratifiedReport:
    probs, masks = [], []
    for images, m, _ in iterate_batches(dataset, batch_size, None, None, crop):
        probs.append(predict(model, images, batch_size))
        masks.append(m)
    return stratified_eval(np.concatenate(probs), np.concatenate(masks))


def _all_mdice(report: StratifiedReport) -> float:
    v = report.row("All").metrics
    return -1.0 if v is None or v["mdice"] is None else v["mdice"]


def fit(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set, val_set, seed: int,
        out_dir=None, test_set=None, progress=None) -> RunLog:
    """Train one model. Deterministic in ``seed``.

    The best All-bucket mDice checkpoint on ``val_set`` is written to
    ``out_dir/best.npz``; the final report is the last-epoch model on
    ``test_set`` (``val_set`` when absent).
    """
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    model = build(model_cfg, seed)
    opt = AdamW(model.parameters(), train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
    data_rng = Rng(seed, "data")
    mc_rng = Rng(seed, "monte-carlo")
    out_dir = Path(out_dir) if out_dir is not None else None
    log = RunLog(seed)
    best = -math.inf
    aug = train_cfg.augment
    if aug.crop != train_cfg.crop:
        aug = AugmentConfig(**{**aug.__dict__, "crop": train_cfg.crop})
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr_max, train_cfg.lr_min)
        losses = []
        epoch_rng = data_rng.stream(f"epoch{epoch}")
        for step, (images, masks, _) in enumerate(iterate_batches(train_set, train_cfg.batch_size,
                                                                   epoch_rng, aug)):
            logits = model(Tensor(images), mc_rng.stream(f"epoch{epoch}/step{step}"), training=True)
            loss = cross_entropy(logits, masks)
            if not np.isfinite(loss.item()):
                log.status = f"aborted: non-finite loss at epoch {epoch} step {step}"
                if out_dir is not None:
                    log.write(out_dir / "runlog.jsonl")
                return log
            loss.backward()
            opt.step(lr)
            opt.zero_grad()
            losses.append(float(loss.item()))
        entry = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        if val_set is not None and ((epoch + 1) % train_cfg.eval_every == 0 or epoch + 1 == train_cfg.epochs):
            report = evaluate_dataset(model, val_set, train_cfg.batch_size, train_cfg.crop)
            entry["val"] = report.to_dict()
            score = _all_mdice(report)
            if score > best:
                best = score
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.npz", model, {"epoch": epoch, "seed": seed})
        log.epochs.append(entry)
        if progress is not None:
            progress(seed, entry)
    final_set = test_set if test_set is not None else val_set
    if final_set is not None:
        log.final = evaluate_dataset(model, final_set, train_cfg.batch_size, train_cfg.crop).to_dict()
    if out_dir is not None:
        save_checkpoint(out_dir / "last.npz", model, {"epoch": train_cfg.epochs - 1, "seed": seed})
        log.write(out_dir / "runlog.jsonl")
    log.model = model
    return log


def summarize(logs: list[RunLog]) -> dict:
    """Mean and standard deviation of final metrics per bucket across runs."""
    finals = [lg.final for lg in logs if lg.final is not None]
    out: dict = {"runs": len(finals), "seeds": [lg.seed for lg in logs if lg.final is not None], "buckets": {}}
    if not finals:
        return out
    for i, row in enumerate(finals[0]["rows"]):
        bucket = row["bucket"]
        stats = {}
        for m in METRICS:
            vals = [f["rows"][i]["metrics"][m] for f in finals
                    if f["rows"][i]["metrics"] is not None and f["rows"][i]["metrics"][m] is not None]
            if vals:
                stats[m] = {"mean": float(np.mean(vals)),
                            "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                            "values": vals}
            else:
                stats[m] = None
        out["buckets"][bucket] = stats
    return out


def fit_multi(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set, val_set, out_dir=None,
              test_set=None, progress=None) -> tuple[list[RunLog], dict]:
    logs = []
    for seed in train_cfg.seeds:
        sub = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        logs.append(fit(model_cfg, train_cfg, train_set, val_set, seed, sub, test_set, progress))
    summary = summarize(logs)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return logs, summary

