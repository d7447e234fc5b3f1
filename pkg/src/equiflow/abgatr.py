"""Anchored-branched geometric algebra transformer.

Surface and volume points become tokens carrying multivector channels (positions as
points, vector features as planes) and invariant scalar channels.  The network is

    embed -> supernode pooling on surface anchors
          -> geometry block (both branches attend to the supernodes)
          -> shared body: anchor attention within a branch, alternating with
             KV exchange (queries from one branch, keys/values from the other
             branch's anchors)
          -> two branch-specific decoder blocks -> read-out heads

Every stage commutes with rigid motions (rotations, reflections, translations) of
the input, given a fixed set of anchor indices.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import Tensor, nn

from equiflow import pga
from equiflow.autodiff import gelu
from equiflow.errors import ConfigMismatch, NonPositiveRadius, TooManyAnchors
from equiflow.layers import (
    EquiLinear,
    GeometricBlock,
    TokenSet,
    check_anchors,
    gated_nonlinearity,
    scalar_positional_features,
    token_layer_norm,
)
from equiflow.preprocess import (  # noqa: F401  (re-exported)
    Batch,
    Normalizer,
    PositionScaling,
    Standardizer,
    compute_position_scaling,
    fit_normalizer,
    fit_standardizer,
    prepare,
)


@dataclass
class ModelConfig:
    n_mv: int = 16
    n_s: int = 64
    heads: int = 4
    hidden_mv: int = 48
    hidden_s: int = 192
    geometry_blocks: int = 1
    shared_blocks: int = 9
    decoder_blocks: int = 2
    anchors_volume: int = 64
    anchors_surface: int = 64
    radius: float = 60.0
    dropout: float = 0.0
    n_freq: int = 8
    length_unit: float = 100.0

    def __post_init__(self):
        if self.radius <= 0:
            raise NonPositiveRadius(f"pooling radius must be positive, got {self.radius}")
        for name in ("n_mv", "n_s", "heads", "hidden_mv", "anchors_volume", "anchors_surface"):
            if getattr(self, name) < 1:
                raise ConfigMismatch(f"{name} must be >= 1")
        if self.hidden_mv % 2:
            raise ConfigMismatch("hidden_mv must be even (product and join halves)")

    @property
    def blocks_per_branch(self) -> int:
        return self.geometry_blocks + self.shared_blocks + self.decoder_blocks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigMismatch(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def fast(cls, **overrides) -> ModelConfig:
        kw = dict(n_mv=8, n_s=16, heads=2, hidden_mv=8, hidden_s=32, shared_blocks=4, anchors_volume=32, anchors_surface=32)
        kw.update(overrides)
        return cls(**kw)


def sample_anchors(n: int, m: int, seed) -> np.ndarray:
    """``m`` distinct indices drawn uniformly from ``range(n)``, sorted."""
    if not 1 <= m <= n:
        raise TooManyAnchors(f"cannot draw {m} anchors from {n} tokens")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=m, replace=False))


@dataclass
class Anchors:
    surface: np.ndarray
    volume: np.ndarray

    @classmethod
    def draw(cls, n_surface: int, n_volume: int, m_surface: int, m_volume: int, seed) -> Anchors:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(
            sample_anchors(n_surface, min(m_surface, n_surface), rng),
            sample_anchors(n_volume, min(m_volume, n_volume), rng),
        )


class SupernodePooling(nn.Module):
    """Radius-ball message passing from surface tokens onto surface anchors.

    Messages carry the neighbour's channels, the relative offset as a translation
    versor and the offset length (in units of the radius) as a scalar; they pass
    through an equivariant linear map and gate, then are averaged per anchor.
    """

    def __init__(self, n_mv: int, n_s: int, radius: float, length_unit: float):
        super().__init__()
        if radius <= 0:
            raise NonPositiveRadius(f"pooling radius must be positive, got {radius}")
        self.radius = radius
        self.length_unit = length_unit
        self.message = EquiLinear(n_mv + 1, n_mv, n_s + 1, n_s)

    def neighbours(self, pos: Tensor, anchor_idx: Tensor) -> tuple[Tensor, Tensor]:
        d = torch.cdist(pos[anchor_idx].double(), pos.double())
        a, b = torch.nonzero(d <= self.radius, as_tuple=True)
        return a, b

    def forward(self, x: TokenSet, pos: Tensor, anchor_idx) -> TokenSet:
        idx = check_anchors(anchor_idx, len(x))
        a, b = self.neighbours(pos, idx)
        offset = pos[b] - pos[idx[a]]
        trans = pga.embed_translation(offset / self.length_unit).unsqueeze(1)
        dist = torch.linalg.vector_norm(offset, dim=-1, keepdim=True) / self.radius
        mv, s = self.message(torch.cat([x.mv[b], trans], dim=1), torch.cat([x.s[b], dist], dim=1))
        mv, s = gated_nonlinearity(mv), gelu(s)
        m = len(idx)
        count = torch.zeros(m, dtype=mv.dtype).index_add_(0, a, torch.ones_like(a, dtype=mv.dtype))
        pooled_mv = torch.zeros(m, *mv.shape[1:], dtype=mv.dtype).index_add_(0, a, mv) / count[:, None, None]
        pooled_s = torch.zeros(m, s.shape[1], dtype=s.dtype).index_add_(0, a, s) / count[:, None]
        return TokenSet(pooled_mv, pooled_s)


def supernode_pool(surface: TokenSet, surface_pos: Tensor, anchor_idx, pool: SupernodePooling) -> TokenSet:
    return pool(surface, surface_pos, anchor_idx)


class BranchEmbedding(nn.Module):
    def __init__(self, n_vec: int, n_scal: int, n_len: int, cfg: ModelConfig):
        super().__init__()
        self.n_freq = cfg.n_freq
        self.length_unit = cfg.length_unit
        in_s = n_scal + 2 * n_len * cfg.n_freq + 1
        self.proj = EquiLinear(1 + n_vec, cfg.n_mv, in_s, cfg.n_s)

    def forward(self, pos: Tensor, vec: Tensor, scal: Tensor, lengths: Tensor, point_sign: float = 1.0) -> TokenSet:
        x = pos / self.length_unit
        # each vector becomes the plane through its own token, so translations act consistently
        offset = -(vec * x.unsqueeze(1)).sum(-1)
        mv = torch.cat([point_sign * pga.embed_point(x).unsqueeze(1), pga.embed_plane(vec, offset)], dim=1)
        const = torch.ones(len(pos), 1, dtype=pos.dtype)
        s = torch.cat([scal, scalar_positional_features(lengths, self.n_freq), const], dim=1)
        mv, s = self.proj(mv, s)
        return TokenSet(mv, s)


class ABGATr(nn.Module):
    def __init__(self, cfg: ModelConfig, surface_features: tuple[int, int, int], volume_features: tuple[int, int, int], surface_vector_target: bool):
        """``*_features`` are ``(n_vector, n_scalar, n_length_scalar)`` input counts."""
        super().__init__()
        self.cfg = cfg
        self.surface_features = tuple(surface_features)
        self.volume_features = tuple(volume_features)
        self.surface_vector_target = surface_vector_target
        block = lambda: GeometricBlock(cfg.n_mv, cfg.n_s, cfg.heads, cfg.hidden_mv, cfg.hidden_s, cfg.dropout)  # noqa: E731
        self.embed_surface = BranchEmbedding(*surface_features, cfg)
        self.embed_volume = BranchEmbedding(*volume_features, cfg)
        self.pool = SupernodePooling(cfg.n_mv, cfg.n_s, cfg.radius, cfg.length_unit)
        self.geometry = nn.ModuleList(block() for _ in range(cfg.geometry_blocks))
        self.shared = nn.ModuleList(block() for _ in range(cfg.shared_blocks))
        self.decoder_surface = nn.ModuleList(block() for _ in range(cfg.decoder_blocks))
        self.decoder_volume = nn.ModuleList(block() for _ in range(cfg.decoder_blocks))
        self.head_surface = EquiLinear(cfg.n_mv, 1, cfg.n_s, 1)
        self.head_volume = EquiLinear(cfg.n_mv, 1, cfg.n_s, 1)

    @classmethod
    def for_batch(cls, cfg: ModelConfig, batch: Batch) -> ABGATr:
        return cls(cfg, _feature_counts(batch, "surface"), _feature_counts(batch, "volume"), batch.surface_vector_target)

    def check_batch(self, batch: Batch) -> None:
        if _feature_counts(batch, "surface") != self.surface_features or _feature_counts(batch, "volume") != self.volume_features:
            raise ConfigMismatch("sample features do not match the model's input layout")
        if batch.surface_vector_target != self.surface_vector_target:
            raise ConfigMismatch("surface target kind does not match the model")

    def encode(self, batch: Batch, anchors: Anchors, point_sign: float = 1.0) -> tuple[TokenSet, TokenSet]:
        xs = self.embed_surface(batch.surface_pos, batch.surface_vec, batch.surface_scal, batch.surface_len, point_sign)
        xv = self.embed_volume(batch.volume_pos, batch.volume_vec, batch.volume_scal, batch.volume_len, point_sign)
        supernodes = self.pool(xs, batch.surface_pos, anchors.surface)
        for blk in self.geometry:
            xs, xv = blk(xs, supernodes), blk(xv, supernodes)
        return xs, xv

    def forward(self, batch: Batch, anchors: Anchors) -> tuple[Tensor, Tensor]:
        """Standardised predictions ``(surface, volume)``.

        A reflection negates the trivector of an embedded point relative to the embedding
        of the reflected point, while planes and scalars follow exactly.  Averaging over
        both point signs makes the prediction exactly equivariant under all of E(3).
        """
        self.check_batch(batch)
        a_s = check_anchors(anchors.surface, len(batch.surface_pos))
        a_v = check_anchors(anchors.volume, len(batch.volume_pos))
        plus = self._branch_outputs(batch, anchors, a_s, a_v, 1.0)
        minus = self._branch_outputs(batch, anchors, a_s, a_v, -1.0)
        return (plus[0] + minus[0]) / 2, (plus[1] + minus[1]) / 2

    def _branch_outputs(self, batch: Batch, anchors: Anchors, a_s: Tensor, a_v: Tensor, point_sign: float):
        xs, xv = self.encode(batch, anchors, point_sign)
        for i, blk in enumerate(self.shared):
            if i % 2 == 0:
                xs, xv = blk(xs, xs.index(a_s)), blk(xv, xv.index(a_v))
            else:
                xs, xv = blk(xs, xv.index(a_v)), blk(xv, xs.index(a_s))
        for blk in self.decoder_surface:
            xs = blk(xs, xs.index(a_s))
        for blk in self.decoder_volume:
            xv = blk(xv, xv.index(a_v))
        xs, xv = token_layer_norm(xs), token_layer_norm(xv)
        s_mv, s_s = self.head_surface(xs.mv, xs.s)
        v_mv, _ = self.head_volume(xv.mv, xv.s)
        if self.surface_vector_target:
            surface = pga.extract_vector(s_mv[:, 0])
        else:
            surface = pga.extract_scalar(s_mv[:, 0]) + s_s[:, 0]
        return surface, pga.extract_vector(v_mv[:, 0])


def _feature_counts(batch: Batch, branch: str) -> tuple[int, int, int]:
    vec = getattr(batch, f"{branch}_vec")
    return (vec.shape[1], getattr(batch, f"{branch}_scal").shape[1], getattr(batch, f"{branch}_len").shape[1])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forward(sample, config: ModelConfig, params: ABGATr, seed, normalizer: Normalizer, dtype=torch.float64):
    """Destandardised predictions for a raw sample with anchors drawn from ``seed``."""
    batch = prepare(sample, normalizer, dtype)
    anchors = Anchors.draw(len(batch.surface_pos), len(batch.volume_pos), config.anchors_surface, config.anchors_volume, seed)
    with torch.no_grad():
        s, v = params(batch, anchors)
    return destandardize(s, v, normalizer)


def destandardize(surface: Tensor, volume: Tensor, norm: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    s = surface.detach().double().numpy()
    v = volume.detach().double().numpy()
    s = norm.surface_target.invert(s if s.ndim == 2 else s[:, None])
    return (s if s.shape[1] == 3 else s[:, 0]), norm.volume_target.invert(v)


def default_parameter_count(surface_features=(2, 0, 0), volume_features=(2, 1, 1)) -> int:
    return count_parameters(ABGATr(ModelConfig(), surface_features, volume_features, False))


__all__ = [
    "ABGATr",
    "Anchors",
    "ModelConfig",
    "SupernodePooling",
    "compute_position_scaling",
    "count_parameters",
    "fit_standardizer",
    "forward",
    "sample_anchors",
    "supernode_pool",
]
