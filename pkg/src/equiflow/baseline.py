"""Non-equivariant anchored-branched transformer used as the augmentation baseline.

Tokens are a linear embedding of ``[sincos(scaled position), raw vectors, scalars]``;
attention is ordinary scaled dot-product attention with rotary position encoding
over the three scaled coordinates.  The branch/anchor/KV-exchange topology and the
supernode pooling match :mod:`equiflow.abgatr`, but nothing here respects rotations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import Tensor, nn

from equiflow.abgatr import Anchors, destandardize
from equiflow.errors import ConfigMismatch, NonPositiveRadius, ShapeMismatch
from equiflow.layers import check_anchors, rope_rotate, scalar_positional_features
from equiflow.preprocess import Batch, Normalizer, prepare


@dataclass
class BaselineConfig:
    dim: int = 192
    heads: int = 3
    mlp_ratio: int = 4
    geometry_blocks: int = 1
    shared_blocks: int = 9
    decoder_blocks: int = 2
    anchors_volume: int = 64
    anchors_surface: int = 64
    radius: float = 60.0
    dropout: float = 0.0
    n_freq: int = 8

    def __post_init__(self):
        if self.radius <= 0:
            raise NonPositiveRadius(f"pooling radius must be positive, got {self.radius}")
        for name in ("dim", "heads", "mlp_ratio", "anchors_volume", "anchors_surface"):
            if getattr(self, name) < 1:
                raise ConfigMismatch(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigMismatch(f"dim {self.dim} not divisible by {self.heads} heads")
        if (self.dim // self.heads) < 6:
            raise ConfigMismatch("head dimension must be at least 6 for 3-D rotary encoding")

    @property
    def blocks_per_branch(self) -> int:
        return self.geometry_blocks + self.shared_blocks + self.decoder_blocks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> BaselineConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigMismatch(f"unknown baseline config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def fast(cls, **overrides) -> BaselineConfig:
        kw = dict(dim=48, heads=3, mlp_ratio=4, shared_blocks=4, anchors_volume=32, anchors_surface=32)
        kw.update(overrides)
        return cls(**kw)


def _rope_split(head_dim: int) -> int:
    """Leading channels of each head that receive 3-D rotary encoding (a multiple of 6)."""
    return (head_dim // 6) * 6


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.rope_dims = _rope_split(self.head_dim)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def _heads(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def _rope(self, x: Tensor, pos: Tensor) -> Tensor:
        r = self.rope_dims
        return torch.cat([rope_rotate(x[..., :r], pos), x[..., r:]], dim=-1)

    def weights(self, x: Tensor, kv: Tensor, pos_q: Tensor, pos_k: Tensor) -> Tensor:
        q = self._rope(self._heads(self.q(x)), pos_q)
        k = self._rope(self._heads(self.kv(kv)[:, : self.dim]), pos_k)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, x: Tensor, kv: Tensor, pos_q: Tensor, pos_k: Tensor) -> Tensor:
        w = self.weights(x, kv, pos_q, pos_k)
        v = self._heads(self.kv(kv)[:, self.dim :])
        return self.out((w @ v).transpose(0, 1).reshape(len(x), self.dim))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, kv: Tensor, pos_q: Tensor, pos_k: Tensor) -> Tensor:
        x = x + self.drop(self.attn(self.norm_q(x), self.norm_kv(kv), pos_q, pos_k))
        return x + self.drop(self.mlp(self.norm_mlp(x)))


class OffsetPooling(nn.Module):
    """Radius-ball pooling onto surface anchors; messages see raw relative offsets."""

    def __init__(self, dim: int, radius: float):
        super().__init__()
        if radius <= 0:
            raise NonPositiveRadius(f"pooling radius must be positive, got {radius}")
        self.radius = radius
        self.message = nn.Sequential(nn.Linear(dim + 3, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, x: Tensor, pos: Tensor, anchor_idx) -> Tensor:
        idx = check_anchors(anchor_idx, len(x))
        d = torch.cdist(pos[idx].double(), pos.double())
        a, b = torch.nonzero(d <= self.radius, as_tuple=True)
        offset = (pos[b] - pos[idx[a]]) / self.radius
        msg = self.message(torch.cat([x[b], offset], dim=-1))
        m = len(idx)
        count = torch.zeros(m, dtype=msg.dtype).index_add_(0, a, torch.ones_like(a, dtype=msg.dtype))
        return torch.zeros(m, msg.shape[1], dtype=msg.dtype).index_add_(0, a, msg) / count[:, None]


class Embedding(nn.Module):
    def __init__(self, n_vec: int, n_scal: int, cfg: BaselineConfig):
        super().__init__()
        self.n_freq = cfg.n_freq
        self.proj = nn.Linear(3 * 2 * cfg.n_freq + 3 * n_vec + n_scal, cfg.dim)

    def forward(self, pos: Tensor, vec: Tensor, scal: Tensor) -> Tensor:
        feats = [scalar_positional_features(pos, self.n_freq), vec.reshape(len(pos), -1), scal]
        return self.proj(torch.cat(feats, dim=-1))


class ABUPT(nn.Module):
    def __init__(self, cfg: BaselineConfig, surface_features: tuple[int, int, int], volume_features: tuple[int, int, int], surface_vector_target: bool):
        """``*_features`` are ``(n_vector, n_scalar, n_length_scalar)``; length scalars ride along in ``scal``."""
        super().__init__()
        self.cfg = cfg
        self.surface_features = tuple(surface_features)
        self.volume_features = tuple(volume_features)
        self.surface_vector_target = surface_vector_target
        block = lambda: Block(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.dropout)  # noqa: E731
        self.embed_surface = Embedding(surface_features[0], surface_features[1], cfg)
        self.embed_volume = Embedding(volume_features[0], volume_features[1], cfg)
        self.pool = OffsetPooling(cfg.dim, cfg.radius)
        self.geometry = nn.ModuleList(block() for _ in range(cfg.geometry_blocks))
        self.shared = nn.ModuleList(block() for _ in range(cfg.shared_blocks))
        self.decoder_surface = nn.ModuleList(block() for _ in range(cfg.decoder_blocks))
        self.decoder_volume = nn.ModuleList(block() for _ in range(cfg.decoder_blocks))
        self.norm_surface = nn.LayerNorm(cfg.dim)
        self.norm_volume = nn.LayerNorm(cfg.dim)
        self.head_surface = nn.Linear(cfg.dim, 3 if surface_vector_target else 1)
        self.head_volume = nn.Linear(cfg.dim, 3)

    @classmethod
    def for_batch(cls, cfg: BaselineConfig, batch: Batch) -> ABUPT:
        return cls(cfg, _feature_counts(batch, "surface"), _feature_counts(batch, "volume"), batch.surface_vector_target)

    def check_batch(self, batch: Batch) -> None:
        if _feature_counts(batch, "surface") != self.surface_features or _feature_counts(batch, "volume") != self.volume_features:
            raise ConfigMismatch("sample features do not match the model's input layout")
        if batch.surface_vector_target != self.surface_vector_target:
            raise ConfigMismatch("surface target kind does not match the model")

    def forward(self, batch: Batch, anchors: Anchors) -> tuple[Tensor, Tensor]:
        self.check_batch(batch)
        ps, pv = batch.surface_pos, batch.volume_pos
        a_s = check_anchors(anchors.surface, len(ps))
        a_v = check_anchors(anchors.volume, len(pv))
        xs = self.embed_surface(ps, batch.surface_vec, batch.surface_scal)
        xv = self.embed_volume(pv, batch.volume_vec, batch.volume_scal)
        supernodes = self.pool(xs, ps, a_s)
        p_sn = ps[a_s]
        for blk in self.geometry:
            xs, xv = blk(xs, supernodes, ps, p_sn), blk(xv, supernodes, pv, p_sn)
        for i, blk in enumerate(self.shared):
            if i % 2 == 0:
                xs, xv = blk(xs, xs[a_s], ps, ps[a_s]), blk(xv, xv[a_v], pv, pv[a_v])
            else:
                xs, xv = blk(xs, xv[a_v], ps, pv[a_v]), blk(xv, xs[a_s], pv, ps[a_s])
        for blk in self.decoder_surface:
            xs = blk(xs, xs[a_s], ps, ps[a_s])
        for blk in self.decoder_volume:
            xv = blk(xv, xv[a_v], pv, pv[a_v])
        surface = self.head_surface(self.norm_surface(xs))
        volume = self.head_volume(self.norm_volume(xv))
        return (surface if self.surface_vector_target else surface[:, 0]), volume


def _feature_counts(batch: Batch, branch: str) -> tuple[int, int, int]:
    vec = getattr(batch, f"{branch}_vec")
    return (vec.shape[1], getattr(batch, f"{branch}_scal").shape[1], getattr(batch, f"{branch}_len").shape[1])


def baseline_forward(sample, config: BaselineConfig, params: ABUPT, seed, normalizer: Normalizer, dtype=torch.float64):
    """Destandardised predictions; ``normalizer`` should be fitted in ``per_axis`` mode."""
    batch = prepare(sample, normalizer, dtype)
    if batch.surface_pos.shape[-1] != 3:
        raise ShapeMismatch("positions must be 3-D")
    anchors = Anchors.draw(len(batch.surface_pos), len(batch.volume_pos), config.anchors_surface, config.anchors_volume, seed)
    with torch.no_grad():
        s, v = params(batch, anchors)
    return destandardize(s, v, normalizer)


def default_parameter_count(surface_features=(2, 0, 0), volume_features=(2, 1, 1)) -> int:
    model = ABUPT(BaselineConfig(), surface_features, volume_features, False)
    return sum(p.numel() for p in model.parameters())


__all__ = ["ABUPT", "BaselineConfig", "baseline_forward", "default_parameter_count"]
