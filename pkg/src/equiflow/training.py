"""Optimiser, schedule, losses, metrics and the train / evaluate / sweep runners."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from equiflow import nsf
from equiflow.abgatr import ABGATr, Anchors, ModelConfig, destandardize
from equiflow.baseline import ABUPT, BaselineConfig
from equiflow.datasets import Sample, apply_rigid_motion, parse_rotation_mode, random_rotation, rotation_about
from equiflow.errors import (
    ConfigMismatch,
    DivergedLoss,
    EmptyDataset,
    InvalidConfig,
    ShapeMismatch,
    StepOutOfRange,
    ZeroReference,
)
from equiflow.preprocess import Normalizer, PositionScaling, compute_position_scaling, fit_normalizer, prepare

MODEL_KINDS = ("abgatr", "baseline")


# --- optimiser ----------------------------------------------------------------------------


@torch.no_grad()
def lion_step(params, grads, momentum, lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.99):
    """One LION update, in place.  Returns ``(params, momentum)``.

    ``c = b1 m + (1 - b1) g``; ``theta -= lr (sign(c) + wd theta)``; ``m = b2 m + (1 - b2) g``.
    """
    if not lr > 0:
        raise InvalidConfig(f"learning rate must be positive, got {lr}")
    if not len(params) == len(grads) == len(momentum):
        raise ShapeMismatch("params, grads and momentum differ in length")
    for p, g, m in zip(params, grads, momentum):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape mismatch {tuple(p.shape)} / {tuple(g.shape)} / {tuple(m.shape)}")
        c = beta1 * m + (1 - beta1) * g
        p.sub_(lr * (torch.sign(c) + wd * p))
        m.mul_(beta2).add_((1 - beta2) * g)
    return params, momentum


class Lion:
    """Minimal stateful wrapper around :func:`lion_step` for ``nn.Module`` parameters."""

    def __init__(self, params, wd: float = 5e-2, beta1: float = 0.9, beta2: float = 0.99):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = [torch.zeros_like(p) for p in self.params]
        self.wd, self.beta1, self.beta2 = wd, beta1, beta2

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        lion_step(self.params, grads, self.momentum, lr, self.wd, self.beta1, self.beta2)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(step: int, total_steps: int, peak: float, final: float = 1e-6, warmup_frac: float = 0.05) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to ``final`` at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    if step < warm:
        return peak * step / warm
    span = total_steps - warm
    t = (step - warm) / span if span > 0 else 1.0
    return final + (peak - final) * 0.5 * (1 + math.cos(math.pi * t))


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


# --- losses and metrics -------------------------------------------------------------------


def branch_loss(preds: tuple[Tensor, Tensor], targets: tuple[Tensor, Tensor]) -> Tensor:
    """Mean of the surface and volume MSEs on standardised targets."""
    (ps, pv), (ts, tv) = preds, targets
    if ps.shape != ts.shape or pv.shape != tv.shape:
        raise ShapeMismatch(f"prediction shapes {tuple(ps.shape)}, {tuple(pv.shape)} vs targets {tuple(ts.shape)}, {tuple(tv.shape)}")
    return 0.5 * (((ps - ts) ** 2).mean() + ((pv - tv) ** 2).mean())


def relative_l2(pred, gt) -> float:
    """``100 ||pred - gt|| / ||gt||`` in percent."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    ref = np.linalg.norm(gt)
    if not ref > 0:
        raise ZeroReference("ground-truth field has zero norm")
    return float(100.0 * np.linalg.norm(pred - gt) / ref)


# --- configuration and records ------------------------------------------------------------


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_frac: float = 0.05
    final_lr: float = 1e-6
    weight_decay: float = 5e-2
    grad_clip: float = 1.0
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0
    augmentation: str = "none"
    precision: str = "single"
    eval_seed: int = 1234

    def __post_init__(self):
        if not 1e-5 <= self.peak_lr <= 1e-3:
            raise InvalidConfig(f"peak_lr must lie in [1e-5, 1e-3], got {self.peak_lr}")
        if not 0 < self.warmup_frac < 1:
            raise InvalidConfig(f"warmup_frac must lie in (0, 1), got {self.warmup_frac}")
        for name in ("final_lr", "grad_clip", "epochs"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be non-negative")
        if self.batch_size != 1:
            raise InvalidConfig("only batch_size 1 is supported")
        if self.precision not in ("single", "double"):
            raise InvalidConfig(f"precision must be 'single' or 'double', got {self.precision!r}")
        try:
            parse_rotation_mode(self.augmentation)
        except Exception as exc:
            raise InvalidConfig(f"augmentation: {exc}") from None

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown training config key {sorted(unknown)[0]!r}")
        return cls(**d)


def config_hash(*dicts: dict) -> str:
    blob = json.dumps(list(dicts), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    model_kind: str
    seed: int
    config_hash: str
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    test_rel_l2: dict[str, list[float]] = field(default_factory=dict)

    def test_score(self, target: str) -> float:
        """Test-set score: mean per-sample relative L2 (percent)."""
        return float(np.mean(self.test_rel_l2[target]))

    def check_finite(self) -> None:
        values = self.train_losses + self.val_losses + [v for vs in self.test_rel_l2.values() for v in vs]
        if not all(math.isfinite(v) for v in values):
            raise DivergedLoss("run record contains non-finite metrics")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> RunRecord:
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- models and checkpoints ---------------------------------------------------------------


def vector_mode(model_kind: str) -> str:
    return "magnitude" if model_kind == "abgatr" else "per_axis"


def default_model_config(model_kind: str, fast: bool = False):
    if model_kind == "abgatr":
        return ModelConfig.fast() if fast else ModelConfig()
    if model_kind == "baseline":
        return BaselineConfig.fast() if fast else BaselineConfig()
    raise InvalidConfig(f"unknown model kind {model_kind!r}; choose from {MODEL_KINDS}")


def model_config_from_dict(model_kind: str, d: dict):
    cls = ModelConfig if model_kind == "abgatr" else BaselineConfig
    try:
        return cls.from_dict(d)
    except ConfigMismatch as exc:
        raise InvalidConfig(str(exc)) from None


def build_model(model_kind: str, model_config, batch) -> nn.Module:
    if model_kind == "abgatr":
        return ABGATr.for_batch(model_config, batch)
    if model_kind == "baseline":
        return ABUPT.for_batch(model_config, batch)
    raise InvalidConfig(f"unknown model kind {model_kind!r}")


def save_checkpoint(path, model: nn.Module, model_kind: str, model_config, normalizer: Normalizer, extra: dict | None = None, optimizer: Lion | None = None) -> None:
    """Parameters (and LION momenta) in an NSF container; configs in the header."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = [n for n, p in model.named_parameters() if p.requires_grad]
        arrays.update({f"momentum/{n}": m.detach().cpu().numpy() for n, m in zip(names, optimizer.momentum)})
    meta = {
        "model_kind": model_kind,
        "model_config": model_config.to_dict(),
        "normalizer": normalizer.to_dict(),
        "surface_features": list(model.surface_features),
        "volume_features": list(model.volume_features),
        "surface_vector_target": model.surface_vector_target,
        **(extra or {}),
    }
    nsf.write(path, arrays, meta)


def load_checkpoint(path) -> tuple[nn.Module, Normalizer, dict]:
    arrays, meta = nsf.read(path)
    kind = meta["model_kind"]
    cfg = model_config_from_dict(kind, meta["model_config"])
    cls = ABGATr if kind == "abgatr" else ABUPT
    model = cls(cfg, tuple(meta["surface_features"]), tuple(meta["volume_features"]), meta["surface_vector_target"])
    state = {k[len("param/") :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return model, Normalizer.from_dict(meta["normalizer"]), meta


# --- training -----------------------------------------------------------------------------


def _check_splits(dataset: dict) -> None:
    for split in ("train", "val", "test"):
        if not dataset.get(split):
            raise EmptyDataset(f"dataset split {split!r} is missing or empty")


def _anchors_for(batch, model_config, rng_or_seed) -> Anchors:
    return Anchors.draw(len(batch.surface_pos), len(batch.volume_pos), model_config.anchors_surface, model_config.anchors_volume, rng_or_seed)


def _augment(sample: Sample, mode: str, rng: np.random.Generator, center) -> Sample:
    name, deg = parse_rotation_mode(mode)
    if name == "none":
        return sample
    return apply_rigid_motion(sample, rotation_about(random_rotation(name, rng, deg), center))


def _eval_anchor_seed(eval_seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([eval_seed, i])


def _mean_loss(model, samples, norm, model_config, eval_seed, dtype) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i, s in enumerate(samples):
            b = prepare(s, norm, dtype)
            preds = model(b, _anchors_for(b, model_config, _eval_anchor_seed(eval_seed, i)))
            total += float(branch_loss(preds, (b.surface_target, b.volume_target)))
    return total / len(samples)


def train(
    config: TrainConfig,
    model_kind: str,
    dataset: dict[str, list[Sample]],
    model_config=None,
    out_dir=None,
    scaling: PositionScaling | None = None,
    log=None,
) -> tuple[RunRecord, nn.Module, Normalizer]:
    """Train on ``dataset['train']``, keep the best-validation weights, score ``dataset['test']``.

    Deterministic given ``config.seed`` (single worker).  Writes ``checkpoint.nsf`` and
    ``metrics.json`` into ``out_dir`` when given.
    """
    _check_splits(dataset)
    model_config = model_config or default_model_config(model_kind)
    dtype = config.dtype
    scaling = scaling or compute_position_scaling([s for split in dataset.values() for s in split])
    norm = fit_normalizer(dataset["train"], vector_mode(model_kind), scaling)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    train_set = dataset["train"]
    model = build_model(model_kind, model_config, prepare(train_set[0], norm, dtype)).to(dtype)
    opt = Lion(model.parameters(), wd=config.weight_decay)
    record = RunRecord(model_kind, config.seed, config_hash(config.to_dict(), model_config.to_dict(), {"kind": model_kind}))
    total = config.epochs * len(train_set)
    step = 0
    best_val, best_state = math.inf, None
    for epoch in range(config.epochs):
        model.train()
        epoch_loss = 0.0
        for i in rng.permutation(len(train_set)):
            sample = _augment(train_set[i], config.augmentation, rng, scaling.center)
            batch = prepare(sample, norm, dtype)
            anchors = _anchors_for(batch, model_config, rng)
            loss = branch_loss(model(batch, anchors), (batch.surface_target, batch.volume_target))
            if not torch.isfinite(loss):
                raise DivergedLoss(f"loss became {float(loss)} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(opt.params, config.grad_clip)
            step += 1
            opt.step(lr_schedule(step, total, config.peak_lr, config.final_lr, config.warmup_frac))
            epoch_loss += loss.item()
        record.train_losses.append(epoch_loss / len(train_set))
        val = _mean_loss(model, dataset["val"], norm, model_config, config.eval_seed, dtype)
        record.val_losses.append(val)
        if not math.isfinite(val):
            raise DivergedLoss(f"validation loss became {val} at epoch {epoch}")
        if val < best_val:
            best_val, best_state, record.best_epoch = val, copy.deepcopy(model.state_dict()), epoch
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} train {record.train_losses[-1]:.4g} val {val:.4g}")
    model.load_state_dict(best_state)
    model.eval()
    record.test_rel_l2 = evaluate(model, norm, dataset["test"], model_config, eval_seed=config.eval_seed, dtype=dtype)
    record.check_finite()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        extra = {"train_config": config.to_dict(), "best_epoch": record.best_epoch}
        save_checkpoint(out / "checkpoint.nsf", model, model_kind, model_config, norm, extra, opt)
        record.save(out / "metrics.json")
    return record, model, norm


# --- evaluation ---------------------------------------------------------------------------


def evaluate(
    model: nn.Module,
    norm: Normalizer,
    samples: list[Sample],
    model_config,
    rotation: str = "none",
    eval_seed: int = 1234,
    dtype: torch.dtype = torch.float32,
) -> dict[str, list[float]]:
    """Per-sample relative L2 (percent) of the destandardised surface and volume fields.

    ``rotation`` optionally moves every test sample by a random rotation about the
    scaling centre first (drawn from ``eval_seed``); anchors are fixed per sample index.
    """
    if not samples:
        raise EmptyDataset("no samples to evaluate")
    rng = np.random.default_rng(np.random.SeedSequence([eval_seed, 7]))
    out: dict[str, list[float]] = {"surface": [], "volume": []}
    model.eval()
    with torch.no_grad():
        for i, s in enumerate(samples):
            s = _augment(s, rotation, rng, norm.scaling.center)
            b = prepare(s, norm, dtype)
            ps, pv = model(b, _anchors_for(b, model_config, _eval_anchor_seed(eval_seed, i)))
            ps, pv = destandardize(ps, pv, norm)
            out["surface"].append(relative_l2(ps, s.surface_target))
            out["volume"].append(relative_l2(pv, s.volume_target))
    return out


# --- rotation sweep -----------------------------------------------------------------------

DEFAULT_DEGREES = (0, 5, 15, 30, 60, 90, 180)
HEATMAP_COLUMNS = ("train_deg", "test_deg", "target", "median_rel_l2_pct")


def rotation_sweep(
    train_degrees,
    test_degrees,
    config: TrainConfig,
    dataset: dict[str, list[Sample]],
    model_kind: str = "baseline",
    model_config=None,
    seeds=(0,),
    out_dir=None,
    log=None,
) -> list[dict]:
    """Train per training rotation rate, score on every test rate.

    Rates are ``per_axis_bounded`` bounds in degrees (0 means no rotation).  Each cell
    is the median over ``seeds`` of the test-set mean relative L2.
    """
    for d in list(train_degrees) + list(test_degrees):
        if not 0 <= d <= 180:
            raise InvalidConfig(f"rotation degrees must lie in [0, 180], got {d}")
    model_config = model_config or default_model_config(model_kind)
    scaling = compute_position_scaling([s for split in dataset.values() for s in split])
    scores: dict[tuple[float, float, str], list[float]] = {}
    for tr_deg in train_degrees:
        for seed in seeds:
            cfg = TrainConfig(**{**config.to_dict(), "seed": seed, "augmentation": _mode(tr_deg)})
            _, model, norm = train(cfg, model_kind, dataset, model_config, scaling=scaling)
            for te_deg in test_degrees:
                res = evaluate(model, norm, dataset["test"], model_config, _mode(te_deg), cfg.eval_seed, cfg.dtype)
                for target, vals in res.items():
                    scores.setdefault((tr_deg, te_deg, target), []).append(float(np.mean(vals)))
            if log:
                log(f"train {tr_deg:g} deg seed {seed} done")
    rows = [
        {"train_deg": k[0], "test_deg": k[1], "target": k[2], "median_rel_l2_pct": float(np.median(v))}
        for k, v in scores.items()
    ]
    if out_dir is not None:
        write_heatmap(Path(out_dir) / "heatmap.csv", rows)
    return rows


def _mode(deg: float) -> str:
    return "none" if deg == 0 else f"per_axis_bounded:{deg:g}"


def write_heatmap(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HEATMAP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**{k: r[k] for k in HEATMAP_COLUMNS}, "train_deg": f"{r['train_deg']:g}", "test_deg": f"{r['test_deg']:g}"})
