"""Position scaling, target standardisation and conversion of samples to model tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from equiflow.errors import EmptyDataset, ValidationError, ZeroScale

CUBE = 1000.0
HALF = CUBE / 2


@dataclass(frozen=True)
class PositionScaling:
    """``x -> (x - center) * scale + 500``; every rotation about ``center`` stays in the cube."""

    center: np.ndarray
    scale: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.center) * self.scale + HALF

    def invert(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y) - HALF) / self.scale + self.center

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> PositionScaling:
        return cls(np.asarray(d["center"], dtype=float), float(d["scale"]))


def _point_clouds(dataset) -> list[np.ndarray]:
    clouds = []
    for item in dataset:
        if isinstance(item, np.ndarray):
            clouds.append(item.reshape(-1, 3))
        else:
            clouds.append(np.concatenate([item.surface_pos, item.volume_pos]))
    return clouds


def compute_position_scaling(dataset) -> PositionScaling:
    """Fit on samples (or raw ``[N, 3]`` arrays): dataset centroid, max radius mapped to 500."""
    clouds = _point_clouds(dataset)
    if not clouds or sum(len(c) for c in clouds) == 0:
        raise EmptyDataset("cannot fit position scaling on an empty dataset")
    pts = np.concatenate(clouds)
    center = pts.mean(axis=0)
    radius = np.sqrt(((pts - center) ** 2).sum(-1).max())
    scale = HALF / radius if radius > 0 else 1.0
    return PositionScaling(center, float(scale))


@dataclass(frozen=True)
class Standardizer:
    """``per_axis``: z-score per component.  ``magnitude``: divide vectors by their mean norm.

    ``scalar``: ordinary z-score.  Only ``magnitude`` (and ``scalar`` on invariant fields)
    commutes with rotations.
    """

    mode: str
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.std + self.mean

    def apply_torch(self, x: torch.Tensor) -> torch.Tensor:
        return (x - torch.as_tensor(self.mean, dtype=x.dtype)) / torch.as_tensor(self.std, dtype=x.dtype)

    def invert_torch(self, y: torch.Tensor) -> torch.Tensor:
        return y * torch.as_tensor(self.std, dtype=y.dtype) + torch.as_tensor(self.mean, dtype=y.dtype)

    @property
    def scale(self) -> float:
        if self.mode != "magnitude":
            raise ValidationError("only magnitude standardisers have a single scale")
        return float(self.std)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(d["mode"], np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def fit_standardizer(targets, mode: str) -> Standardizer:
    x = np.concatenate([np.asarray(t, dtype=float).reshape(len(t), -1) for t in targets]) if isinstance(
        targets, (list, tuple)
    ) else np.asarray(targets, dtype=float).reshape(len(targets), -1)
    if mode == "magnitude":
        scale = float(np.linalg.norm(x, axis=-1).mean())
        if not scale > 0:
            raise ZeroScale("mean vector magnitude is zero")
        return Standardizer("magnitude", np.float64(0.0), np.float64(scale))
    if mode == "per_axis":
        std = x.std(axis=0)
        if not np.any(std > 0):
            raise ZeroScale("every target component has zero variance")
        # a constant component (e.g. an axis-aligned field) is only centred
        return Standardizer("per_axis", x.mean(axis=0), np.where(std > 0, std, 1.0))
    if mode == "scalar":
        if x.shape[1] != 1:
            raise ValidationError("scalar standardisation needs a scalar field")
        std = float(x.std())
        if not std > 0:
            raise ZeroScale("scalar target has zero variance")
        return Standardizer("scalar", np.float64(x.mean()), np.float64(std))
    raise ValidationError(f"unknown standardisation mode {mode!r}")


@dataclass
class Normalizer:
    """Everything fitted on the training split that turns a sample into model tensors."""

    scaling: PositionScaling
    surface_target: Standardizer
    volume_target: Standardizer
    surface_scal_mean: np.ndarray
    surface_scal_std: np.ndarray
    volume_scal_mean: np.ndarray
    volume_scal_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "scaling": self.scaling.to_dict(),
            "surface_target": self.surface_target.to_dict(),
            "volume_target": self.volume_target.to_dict(),
            "surface_scal_mean": self.surface_scal_mean.tolist(),
            "surface_scal_std": self.surface_scal_std.tolist(),
            "volume_scal_mean": self.volume_scal_mean.tolist(),
            "volume_scal_std": self.volume_scal_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            PositionScaling.from_dict(d["scaling"]),
            Standardizer.from_dict(d["surface_target"]),
            Standardizer.from_dict(d["volume_target"]),
            arr("surface_scal_mean"),
            arr("surface_scal_std"),
            arr("volume_scal_mean"),
            arr("volume_scal_std"),
        )


def fit_normalizer(train, vector_mode: str, scaling: PositionScaling | None = None) -> Normalizer:
    """``vector_mode`` is ``magnitude`` (equivariant model) or ``per_axis`` (baseline)."""
    if not train:
        raise EmptyDataset("training split is empty")
    scaling = scaling or compute_position_scaling(train)
    first = train[0]
    s_mode = vector_mode if first.surface_target_is_vector else "scalar"

    def scal_stats(arrays, lengths):
        x = np.concatenate(arrays)
        x = x * np.where(lengths, scaling.scale, 1.0) if x.shape[1] else x
        std = x.std(axis=0) if len(x) else np.ones(0)
        return x.mean(axis=0), np.where(std > 0, std, 1.0)

    s_len = np.asarray(first.meta.get("surface_scal_length", [False] * first.surface_scal.shape[1]), dtype=bool)
    v_len = np.asarray(first.meta.get("volume_scal_length", [False] * first.volume_scal.shape[1]), dtype=bool)
    sm, ss = scal_stats([s.surface_scal for s in train], s_len)
    vm, vs = scal_stats([s.volume_scal for s in train], v_len)
    return Normalizer(
        scaling,
        fit_standardizer([s.surface_target for s in train], s_mode),
        fit_standardizer([s.volume_target for s in train], vector_mode),
        sm,
        ss,
        vm,
        vs,
    )


@dataclass
class Batch:
    """Model-ready tensors of one sample; positions in scaled units, targets standardised."""

    surface_pos: torch.Tensor
    volume_pos: torch.Tensor
    surface_vec: torch.Tensor
    volume_vec: torch.Tensor
    surface_scal: torch.Tensor
    volume_scal: torch.Tensor
    surface_len: torch.Tensor
    volume_len: torch.Tensor
    surface_target: torch.Tensor
    volume_target: torch.Tensor
    surface_vector_target: bool

    def to(self, dtype: torch.dtype) -> Batch:
        kw = {k: (v.to(dtype) if isinstance(v, torch.Tensor) else v) for k, v in self.__dict__.items()}
        return Batch(**kw)


def prepare(sample, norm: Normalizer, dtype: torch.dtype = torch.float32) -> Batch:
    sc = norm.scaling
    s_len = np.asarray(sample.meta.get("surface_scal_length", [False] * sample.surface_scal.shape[1]), dtype=bool)
    v_len = np.asarray(sample.meta.get("volume_scal_length", [False] * sample.volume_scal.shape[1]), dtype=bool)

    def scal(x, lengths, mean, std):
        scaled = x * np.where(lengths, sc.scale, 1.0) if x.shape[1] else x
        return (scaled - mean) / std, scaled[:, lengths] if x.shape[1] else scaled

    s_z, s_l = scal(sample.surface_scal, s_len, norm.surface_scal_mean, norm.surface_scal_std)
    v_z, v_l = scal(sample.volume_scal, v_len, norm.volume_scal_mean, norm.volume_scal_std)
    st = norm.surface_target.apply(sample.surface_target.reshape(len(sample.surface_target), -1))
    vt = norm.volume_target.apply(sample.volume_target)
    t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)  # noqa: E731
    return Batch(
        surface_pos=t(sc.apply(sample.surface_pos)),
        volume_pos=t(sc.apply(sample.volume_pos)),
        surface_vec=t(sample.surface_vec),
        volume_vec=t(sample.volume_vec),
        surface_scal=t(s_z),
        volume_scal=t(v_z),
        surface_len=t(s_l),
        volume_len=t(v_l),
        surface_target=t(st if sample.surface_target_is_vector else st[:, 0]),
        volume_target=t(vt),
        surface_vector_target=sample.surface_target_is_vector,
    )
