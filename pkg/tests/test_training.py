import csv

import numpy as np
import pytest
import torch

from equiflow.abgatr import ModelConfig
from equiflow.baseline import BaselineConfig
from equiflow.datasets import generate_dataset
from equiflow.errors import EmptyDataset, InvalidConfig, ShapeMismatch, StepOutOfRange, ZeroReference
from equiflow.training import (
    RunRecord,
    TrainConfig,
    branch_loss,
    clip_grad_norm,
    evaluate,
    lion_step,
    load_checkpoint,
    lr_schedule,
    relative_l2,
    rotation_sweep,
    train,
)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_lion_examples():
    p, m = [t(0.7, -1.2)], [t(0.0, 0.0)]
    lion_step(p, [t(0.0, 0.0)], m, lr=0.1, wd=0.0)
    assert p[0].tolist() == [0.7, -1.2]
    p, m = [t(0.0)], [t(0.0)]
    lion_step(p, [t(5.0)], m, lr=0.1, wd=0.0)
    assert p[0].item() == -0.1
    assert m[0].item() == pytest.approx(0.01 * 5.0)
    with pytest.raises(ShapeMismatch):
        lion_step([t(0.0)], [t(0.0, 1.0)], [t(0.0)], lr=0.1, wd=0.0)
    with pytest.raises(InvalidConfig):
        lion_step([t(0.0)], [t(0.0)], [t(0.0)], lr=0.0, wd=0.0)


def test_lion_converges_on_quadratic():
    theta, m = [t(1.0)], [t(0.0)]
    for _ in range(100):
        lion_step(theta, [2 * theta[0].clone()], m, lr=0.01, wd=0.0)
    assert abs(theta[0].item()) <= 0.02


def test_lion_is_invariant_to_gradient_scale(rng):
    g = torch.as_tensor(rng.normal(size=(4, 3)))
    p0 = torch.as_tensor(rng.normal(size=(4, 3)))
    a, b = [p0.clone()], [p0.clone()]
    lion_step(a, [g], [torch.zeros(4, 3, dtype=torch.float64)], lr=0.05, wd=0.0)
    lion_step(b, [1e4 * g], [torch.zeros(4, 3, dtype=torch.float64)], lr=0.05, wd=0.0)
    assert torch.equal(a[0], b[0])


def test_schedule_examples():
    total, peak = 1000, 1e-3
    assert lr_schedule(0, total, peak) == 0.0
    assert lr_schedule(50, total, peak) == peak
    assert lr_schedule(total, total, peak) == pytest.approx(1e-6, abs=1e-18)
    # warmup ends at 50, decay midpoint is 525
    assert lr_schedule(525, total, peak) == pytest.approx((peak + 1e-6) / 2, abs=1e-12)
    assert lr_schedule(25, total, peak) == pytest.approx(peak / 2, abs=1e-15)
    lrs = [lr_schedule(s, total, peak) for s in range(50, total + 1)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
    with pytest.raises(StepOutOfRange):
        lr_schedule(1001, total, peak)
    with pytest.raises(StepOutOfRange):
        lr_schedule(-1, total, peak)


def test_clip_grad_norm(rng):
    w = torch.nn.Parameter(torch.as_tensor(rng.normal(size=10)))
    w.grad = torch.as_tensor(rng.normal(size=10)) * 50
    pre = clip_grad_norm([w], 1.0)
    assert pre > 1.0 and float(w.grad.norm()) <= 1.0 + 1e-9
    w.grad = torch.full((10,), 0.01, dtype=torch.float64)
    before = w.grad.clone()
    clip_grad_norm([w], 1.0)
    assert torch.equal(w.grad, before)


def test_branch_loss(rng):
    ts, tv = torch.as_tensor(rng.normal(size=7)), torch.as_tensor(rng.normal(size=(9, 3)))
    assert branch_loss((ts, tv), (ts, tv)).item() == 0.0
    ps = ts + np.sqrt(2.0)
    pv = tv + 2.0
    assert branch_loss((ps, pv), (ts, tv)).item() == pytest.approx(3.0, abs=1e-12)
    ps, pv = torch.as_tensor(rng.normal(size=7)), torch.as_tensor(rng.normal(size=(9, 3)))
    brute = 0.5 * (sum((a - b) ** 2 for a, b in zip(ps.tolist(), ts.tolist())) / 7 + sum(
        (a - b) ** 2 for ra, rb in zip(pv.tolist(), tv.tolist()) for a, b in zip(ra, rb)
    ) / 27)
    assert branch_loss((ps, pv), (ts, tv)).item() == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        branch_loss((ps[:3], pv), (ts, tv))


def test_relative_l2_examples(rng):
    gt = rng.normal(size=(10, 3))
    assert relative_l2(gt, gt) == 0.0
    assert relative_l2(np.zeros_like(gt), gt) == pytest.approx(100.0)
    assert relative_l2(2 * gt, gt) == pytest.approx(100.0)
    with pytest.raises(ZeroReference):
        relative_l2(gt, np.zeros_like(gt))


def test_train_config_validation():
    for bad in ({"peak_lr": 1e-2}, {"warmup_frac": 1.0}, {"epochs": 0}, {"augmentation": "spin"}, {"precision": "half"}, {"batch_size": 2}):
        with pytest.raises(InvalidConfig):
            TrainConfig(**bad)
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


def tiny_dataset(kind="hemo", n=2):
    d = generate_dataset(kind, {"train": n, "val": 1, "test": 2}, "canonical", 0, 16, 32)
    return d


def test_missing_split():
    d = tiny_dataset()
    with pytest.raises(EmptyDataset):
        train(TrainConfig(epochs=1), "baseline", {"train": d["train"], "val": [], "test": d["test"]}, BaselineConfig.fast())


def test_overfit_single_sample():
    d = generate_dataset("aero", {"train": 1}, "canonical", 0, 16, 32)
    ds = {"train": d["train"], "val": d["train"], "test": d["train"]}
    # anchors cover every token, so the only noise left is the optimiser's
    mc = ModelConfig.fast(shared_blocks=2, anchors_surface=32, anchors_volume=32)
    rec, _, _ = train(TrainConfig(epochs=200, peak_lr=1e-3), "abgatr", ds, mc)
    assert rec.train_losses[0] / rec.train_losses[-1] >= 100
    mc = BaselineConfig.fast(shared_blocks=2, anchors_surface=32, anchors_volume=32)
    rec, _, _ = train(TrainConfig(epochs=200, peak_lr=1e-3), "baseline", ds, mc)
    assert rec.train_losses[0] / rec.train_losses[-1] >= 100


@pytest.mark.parametrize("kind", ["abgatr", "baseline"])
def test_seeded_training_is_bitwise_reproducible(tmp_path, kind):
    ds = tiny_dataset()
    mc = ModelConfig.fast(shared_blocks=2, anchors_surface=8, anchors_volume=8) if kind == "abgatr" else BaselineConfig.fast(anchors_surface=8, anchors_volume=8)
    cfg = TrainConfig(epochs=3, augmentation="haar", seed=4)
    r1, m1, _ = train(cfg, kind, ds, mc, out_dir=tmp_path / "a")
    r2, m2, _ = train(cfg, kind, ds, mc, out_dir=tmp_path / "b")
    assert r1.to_dict() == r2.to_dict()
    assert all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))
    assert RunRecord.load(tmp_path / "a" / "metrics.json").to_dict() == r1.to_dict()
    assert len(r1.test_rel_l2["surface"]) == 2 and len(r1.train_losses) == 3


def test_checkpoint_round_trip(tmp_path):
    ds = tiny_dataset()
    mc = ModelConfig.fast(shared_blocks=2, anchors_surface=8, anchors_volume=8)
    cfg = TrainConfig(epochs=1)
    rec, model, norm = train(cfg, "abgatr", ds, mc, out_dir=tmp_path)
    loaded, norm2, meta = load_checkpoint(tmp_path / "checkpoint.nsf")
    assert meta["model_kind"] == "abgatr" and meta["train_config"] == cfg.to_dict()
    assert norm2.to_dict() == norm.to_dict()
    for (k, a), b in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b.to(a.dtype)), k
    res = evaluate(loaded.float(), norm2, ds["test"], mc, eval_seed=cfg.eval_seed)
    assert res == rec.test_rel_l2


def test_rotation_sweep_table(tmp_path):
    ds = tiny_dataset("aero", 1)
    rows = rotation_sweep([0, 90], [0, 180], TrainConfig(epochs=1), ds, "baseline", BaselineConfig.fast(shared_blocks=2), out_dir=tmp_path)
    assert len(rows) == 2 * 2 * 2
    with (tmp_path / "heatmap.csv").open() as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == ["train_deg", "test_deg", "target", "median_rel_l2_pct"]
    assert {r["train_deg"] for r in table} == {"0", "90"}
    with pytest.raises(InvalidConfig):
        rotation_sweep([200], [0], TrainConfig(epochs=1), ds)
