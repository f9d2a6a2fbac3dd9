import json
import math

import numpy as np
import pytest

from svanet.core import ConfigurationError, Parameter, Tensor
from svanet.data import AugmentConfig, SegmentationDataset, SynthSpec, generate_synthetic
from svanet.model import ModelConfig
from svanet.train import AdamW, TrainConfig, cosine_lr, cross_entropy, fit, fit_multi, summarize

TINY = ModelConfig(num_classes=3, width_multiplier=0.125, input_hw=(64, 64))


def test_cross_entropy_uniform_is_log_k():
    for k in (2, 3, 7):
        logits = Tensor(np.zeros((2, k, 4, 4)))
        target = np.random.default_rng(k).integers(0, k, (2, 4, 4))
        assert cross_entropy(logits, target).item() == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_brute_force(nprng):
    logits = nprng.standard_normal((2, 3, 3, 5)) * 3
    target = nprng.integers(0, 3, (2, 3, 5))
    total = 0.0
    for n in range(2):
        for y in range(3):
            for x in range(5):
                z = logits[n, :, y, x]
                total += math.log(sum(math.exp(v) for v in z)) - z[target[n, y, x]]
    assert cross_entropy(Tensor(logits), target).item() == pytest.approx(total / 30, abs=1e-7)


def test_cross_entropy_gradient(nprng):
    logits = Tensor(nprng.standard_normal((1, 3, 2, 2)), requires_grad=True)
    target = nprng.integers(0, 3, (1, 2, 2))
    cross_entropy(logits, target).backward()
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.eye(3)[target].transpose(0, 3, 1, 2)
    np.testing.assert_allclose(logits.grad, (p - onehot) / 4, atol=1e-12)


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 5e-5, 1e-6) == pytest.approx(5e-5)
    assert cosine_lr(100, 100, 5e-5, 1e-6) == pytest.approx(1e-6)
    assert cosine_lr(50, 100, 5e-5, 1e-6) == pytest.approx(2.55e-5)
    lrs = [cosine_lr(t, 100, 5e-5, 1e-6) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigurationError):
        cosine_lr(101, 100, 5e-5, 1e-6)


def reference_adamw_trajectory(p0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    p, m, v, out = float(p0), 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def test_adamw_first_step():
    p = Parameter(np.array([1.0]), dtype=np.float64)
    opt = AdamW([p], weight_decay=0.0)
    p.grad = np.array([0.3])
    opt.step(0.1)
    # bias-corrected first step moves by lr * sign(g)
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adamw_decoupled_decay_without_gradient():
    p = Parameter(np.array([2.0]), dtype=np.float64)
    opt = AdamW([p], weight_decay=0.5)
    opt.step(0.1)
    assert p.data[0] == pytest.approx(2.0 * 0.95)


def test_adamw_trajectory_matches_scalar_reference():
    target = 0.7
    p = Parameter(np.array([3.0, -1.0]), dtype=np.float64)
    opt = AdamW([p], weight_decay=0.01)
    traj = []
    for _ in range(50):
        p.grad = 2 * (p.data - target)
        opt.step(0.05)
        traj.append(p.data.copy())
    for i, p0 in enumerate((3.0, -1.0)):
        ref = reference_adamw_trajectory(p0, lambda x: 2 * (x - target), 50, 0.05)
        np.testing.assert_allclose([t[i] for t in traj], ref, atol=1e-10, rtol=0)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_min=1.0, lr_max=0.1)
    with pytest.raises(ConfigurationError):
        TrainConfig(seeds=())


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_synthetic(SynthSpec(canvas=64, count=4, seed=0), root / "train", "train")
    generate_synthetic(SynthSpec(canvas=64, count=2, seed=0), root / "test", "test")
    return SegmentationDataset(root / "train", 3), SegmentationDataset(root / "test", 3)


def _tcfg(**kw):
    base = dict(epochs=2, batch_size=2, crop=64, lr_max=2e-3, lr_min=1e-5, seeds=(0,),
                augment=AugmentConfig(crop=64))
    return TrainConfig(**{**base, **kw})


def test_fit_is_deterministic_and_logs_schedule(tiny_data, tmp_path):
    tr, te = tiny_data
    cfg = _tcfg()
    a = fit(TINY, cfg, tr, te, seed=3, out_dir=tmp_path / "a")
    b = fit(TINY, cfg, tr, te, seed=3)
    assert a.to_lines() == b.to_lines()
    for e in a.epochs:
        assert e["lr"] == cosine_lr(e["epoch"], cfg.epochs, cfg.lr_max, cfg.lr_min)
    assert (tmp_path / "a" / "best.npz").exists() and (tmp_path / "a" / "last.npz").exists()
    lines = (tmp_path / "a" / "runlog.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["kind"] == "final"


def test_fit_seeds_differ(tiny_data):
    tr, te = tiny_data
    a = fit(TINY, _tcfg(epochs=1), tr, None, seed=0)
    b = fit(TINY, _tcfg(epochs=1), tr, None, seed=1)
    assert a.losses != b.losses


def test_loss_decreases(tiny_data):
    tr, _ = tiny_data
    log = fit(TINY, _tcfg(epochs=6, augment=AugmentConfig.off(64)), tr, None, seed=0)
    assert log.losses[-1] < log.losses[0]


def test_fit_multi_summary_mean_is_exact(tiny_data, tmp_path):
    tr, te = tiny_data
    logs, summary = fit_multi(TINY, _tcfg(epochs=1, seeds=(0, 1)), tr, te, tmp_path, te)
    assert summary["runs"] == 2
    stats = summary["buckets"]["All"]["mdice"]
    vals = [lg.final["rows"][2]["metrics"]["mdice"] for lg in logs]
    assert stats["values"] == vals
    assert stats["mean"] == float(np.mean(vals))
    assert stats["sd"] == pytest.approx(float(np.std(vals, ddof=1)))
    assert json.loads((tmp_path / "summary.json").read_text()) == summary


def test_summarize_without_finals():
    from svanet.train import RunLog
    assert summarize([RunLog(0)])["runs"] == 0


def test_empty_training_set_errors(tiny_data):
    with pytest.raises(ConfigurationError):
        fit(TINY, _tcfg(), [], None, seed=0)
