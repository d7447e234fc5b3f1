"""E(3)-equivariant layers over token sets of multivector and scalar channels.

A :class:`TokenSet` carries ``mv`` of shape ``[N, C, 16]`` and ``s`` of shape ``[N, S]``.
Rigid motions act on ``mv`` by sandwich and leave ``s`` untouched; every layer here
commutes with that action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from equiflow import pga
from equiflow.autodiff import gelu, softmax
from equiflow.errors import DuplicateAnchor, EmptyAnchors, IndexOutOfRange, OddChannelCount, ShapeMismatch


@dataclass
class TokenSet:
    mv: Tensor
    s: Tensor

    def __post_init__(self):
        if self.mv.dim() != 3 or self.mv.shape[-1] != 16:
            raise ShapeMismatch(f"mv must be [N, C, 16], got {tuple(self.mv.shape)}")
        if self.s.dim() != 2 or self.s.shape[0] != self.mv.shape[0]:
            raise ShapeMismatch(f"s must be [N, S] with N={self.mv.shape[0]}, got {tuple(self.s.shape)}")

    def __len__(self) -> int:
        return self.mv.shape[0]

    def index(self, idx) -> TokenSet:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TokenSet(self.mv[idx], self.s[idx])

    def transform(self, versor: pga.Versor) -> TokenSet:
        return TokenSet(pga.sandwich(versor, self.mv), self.s)

    @staticmethod
    def cat(parts) -> TokenSet:
        parts = list(parts)
        return TokenSet(torch.cat([p.mv for p in parts]), torch.cat([p.s for p in parts]))


# --- equivariant linear maps --------------------------------------------------------------


def _equi_linear_basis() -> np.ndarray:
    """``[9, 16, 16]`` maps: five grade projections, then ``x -> e0 grade_k(x)`` for k=0..3."""
    basis = np.zeros((9, 16, 16))
    for k in range(5):
        for i in np.flatnonzero(pga.GRADES == k):
            basis[k, i, i] = 1.0
    gp = pga.cayley_table()
    for k in range(4):
        for i in np.flatnonzero(pga.GRADES == k):
            basis[5 + k, :, i] = gp[1, i, :]
    return basis


_BASIS = _equi_linear_basis()


def equi_linear(weights: Tensor, x: Tensor) -> Tensor:
    """Mix ``[..., in, 16]`` into ``[..., out, 16]`` with ``weights`` of shape ``[out, in, 9]``."""
    if weights.dim() != 3 or weights.shape[-1] != 9 or weights.shape[1] != x.shape[-2]:
        raise ShapeMismatch(f"weights {tuple(weights.shape)} do not fit input {tuple(x.shape)}")
    basis = torch.as_tensor(_BASIS, dtype=x.dtype, device=x.device)
    full = torch.einsum("oim,mkj->oikj", weights, basis)
    return torch.einsum("...ij,oikj->...ok", x, full)


class EquiLinear(nn.Module):
    """Equivariant linear map on multivector channels with an invariant scalar pathway.

    Scalar channels feed the multivector scalar component and vice versa; both
    directions only touch E(3)-invariant quantities.
    """

    def __init__(self, in_mv: int, out_mv: int, in_s: int = 0, out_s: int = 0, init_scale: float = 1.0):
        super().__init__()
        self.in_mv, self.out_mv, self.in_s, self.out_s = in_mv, out_mv, in_s, out_s
        fan_in = max(in_mv + in_s, 1)
        w = torch.randn(out_mv, in_mv, 9) / math.sqrt(fan_in) * init_scale
        w[..., 5:] *= 0.1
        self.weight = nn.Parameter(w)
        self.s_to_mv = nn.Parameter(torch.randn(out_mv, in_s) / math.sqrt(fan_in) * init_scale) if in_s else None
        if out_s:
            self.mv_to_s = nn.Parameter(torch.randn(out_s, in_mv) / math.sqrt(fan_in) * init_scale)
            self.s_to_s = nn.Linear(in_s, out_s) if in_s else None
            self.s_bias = nn.Parameter(torch.zeros(out_s)) if not in_s else None
        else:
            self.mv_to_s = self.s_to_s = self.s_bias = None

    def forward(self, mv: Tensor, s: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        out_mv = equi_linear(self.weight, mv)
        if self.s_to_mv is not None and s is not None:
            scalar = s @ self.s_to_mv.T
            out_mv = out_mv + torch.nn.functional.pad(scalar.unsqueeze(-1), (0, 15))
        out_s = None
        if self.out_s:
            out_s = mv[..., 0] @ self.mv_to_s.T
            if self.s_to_s is not None:
                out_s = out_s + self.s_to_s(s)
            else:
                out_s = out_s + self.s_bias
        return out_mv, out_s


# --- bilinears and nonlinearities ---------------------------------------------------------


def bilinear_halves(x: Tensor, y: Tensor, reference: Tensor) -> Tensor:
    """Geometric product on the first half of the channels, join on the second half.

    The join is scaled by the pseudoscalar component of ``reference`` (shape
    ``[..., 16]``, broadcast over channels), which flips sign under reflections exactly
    as the join does, so the result is equivariant under the full E(3).
    """
    if x.shape != y.shape:
        raise ShapeMismatch(f"bilinear inputs {tuple(x.shape)} vs {tuple(y.shape)}")
    c = x.shape[-2]
    if c % 2:
        raise ShapeMismatch(f"bilinear needs an even channel count, got {c}")
    h = c // 2
    prod = pga.geometric_product(x[..., :h, :], y[..., :h, :])
    joined = pga.join(x[..., h:, :], y[..., h:, :]) * reference[..., 15].unsqueeze(-1).unsqueeze(-1)
    return torch.cat([prod, joined], dim=-2)


def geometric_bilinear(x: Tensor, y: Tensor, weights: Tensor, reference: Tensor) -> Tensor:
    return equi_linear(weights, bilinear_halves(x, y, reference))


def gated_nonlinearity(x: Tensor) -> Tensor:
    return gelu(x[..., :1]) * x


def equi_layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    sq = pga.invariant_inner(x, x).mean(dim=-1, keepdim=True)
    return x / torch.sqrt(sq + eps).unsqueeze(-1)


def scalar_layer_norm(s: Tensor, eps: float = 1e-6) -> Tensor:
    if s.shape[-1] == 0:
        return s
    mu = s.mean(-1, keepdim=True)
    var = ((s - mu) ** 2).mean(-1, keepdim=True)
    return (s - mu) / torch.sqrt(var + eps)


def token_layer_norm(x: TokenSet, eps: float = 1e-6) -> TokenSet:
    return TokenSet(equi_layer_norm(x.mv, eps), scalar_layer_norm(x.s, eps))


# --- positional encodings -----------------------------------------------------------------


def frequency_ladder(n_freq: int, max_wavelength: float = 10_000.0) -> Tensor:
    return max_wavelength ** (-torch.arange(n_freq, dtype=torch.float64) / n_freq)


def scalar_positional_features(values: Tensor, n_freq: int, max_wavelength: float = 10_000.0) -> Tensor:
    """Sine-cosine expansion: per input dimension a sine block then a cosine block."""
    freqs = frequency_ladder(n_freq, max_wavelength).to(values)
    angles = values.unsqueeze(-1) * freqs  # [N, d, F]
    feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return feats.reshape(*values.shape[:-1], values.shape[-1] * 2 * n_freq)


def rope_rotate(s: Tensor, positions: Tensor | None, max_wavelength: float = 10_000.0) -> Tensor:
    """Rotate consecutive channel pairs by position-dependent angles.

    Channels are split into one group per position dimension; pair ``f`` of group
    ``d`` turns by ``freq_f * positions[:, d]``.  ``positions=None`` is the identity.
    """
    if positions is None:
        return s
    p = positions.shape[-1]
    n = s.shape[-1]
    if n % (2 * p):
        raise OddChannelCount(f"{n} channels cannot be split into {p} groups of pairs")
    n_freq = n // (2 * p)
    freqs = frequency_ladder(n_freq, max_wavelength).to(s)
    angles = positions.unsqueeze(-1) * freqs  # [..., N, p, F]
    cos, sin = torch.cos(angles), torch.sin(angles)
    pairs = s.reshape(*s.shape[:-1], p, n_freq, 2)
    a, b = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return rotated.reshape(s.shape)


# --- attention ----------------------------------------------------------------------------


def _point_features(mv: Tensor, eps: float) -> tuple[Tensor, Tensor, Tensor]:
    """Homogeneous point numerators ``p``, weights ``w`` and the ``|w| > eps`` mask."""
    w = mv[..., 14]
    valid = (w.abs() > eps).to(mv.dtype)
    return pga.point_coordinates(mv) * valid.unsqueeze(-1), w * valid, valid


def attention_logits(
    q_mv: Tensor,
    k_mv: Tensor,
    q_s: Tensor,
    k_s: Tensor,
    alpha: Tensor,
    beta: Tensor,
    gamma: Tensor,
    eps: float = pga.POINT_EPS,
) -> Tensor:
    """Logits ``[..., Nq, Nk]``; leading axes (e.g. heads) broadcast with the weights.

    ``alpha``, ``beta``, ``gamma`` are positive and shaped like the leading axes.
    """
    if q_mv.shape[-2:] != k_mv.shape[-2:] or q_s.shape[-1] != k_s.shape[-1]:
        raise ShapeMismatch("query and key token sets must share channel counts")
    n_mv, n_s = q_mv.shape[-2], q_s.shape[-1]
    lead = q_mv.shape[:-3]

    def flat(t):
        return t.reshape(*t.shape[:-2], -1)

    inner = flat(q_mv[..., pga.EUCLIDEAN_IDX]) @ flat(k_mv[..., pga.EUCLIDEAN_IDX]).transpose(-1, -2)

    # -|a - b|^2 for a = p/w, b = p'/w', weighted by w^2 w'^2 so no division is needed.
    p, w, _ = _point_features(q_mv, eps)
    pk, wk, _ = _point_features(k_mv, eps)
    phi = torch.cat([2 * w.unsqueeze(-1) * p, -(p * p).sum(-1, keepdim=True), -(w * w).unsqueeze(-1)], dim=-1)
    psi = torch.cat([wk.unsqueeze(-1) * pk, (wk * wk).unsqueeze(-1), (pk * pk).sum(-1, keepdim=True)], dim=-1)
    dist = flat(phi) @ flat(psi).transpose(-1, -2)

    scal = q_s @ k_s.transpose(-1, -2)

    def bc(w):
        return w.reshape(*lead, 1, 1) if lead else w

    logits = bc(alpha) * inner + bc(beta) * dist + bc(gamma) * scal
    return logits / math.sqrt(13 * n_mv + n_s)


def attention_weights(q: TokenSet, k: TokenSet, alpha, beta, gamma) -> Tensor:
    """Single-head attention weights ``[Nq, Nk]`` between two token sets."""
    as_t = lambda v: torch.as_tensor(v, dtype=q.mv.dtype)  # noqa: E731
    return softmax(attention_logits(q.mv, k.mv, q.s, k.s, as_t(alpha), as_t(beta), as_t(gamma)), axis=-1)


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class GeometricAttention(nn.Module):
    """Multi-head geometric attention from query tokens onto a key/value token set."""

    def __init__(self, n_mv: int, n_s: int, heads: int):
        super().__init__()
        if n_mv % heads or n_s % heads:
            raise ShapeMismatch(f"channels ({n_mv}, {n_s}) not divisible by {heads} heads")
        self.n_mv, self.n_s, self.heads = n_mv, n_s, heads
        self.q = EquiLinear(n_mv, n_mv, n_s, n_s)
        self.k = EquiLinear(n_mv, n_mv, n_s, n_s)
        self.v = EquiLinear(n_mv, n_mv, n_s, n_s)
        self.out = EquiLinear(n_mv, n_mv, n_s, n_s)
        init = _inverse_softplus(1.0)
        self.raw_alpha = nn.Parameter(torch.full((heads,), init))
        self.raw_beta = nn.Parameter(torch.full((heads,), init))
        self.raw_gamma = nn.Parameter(torch.full((heads,), init))

    def coefficients(self) -> tuple[Tensor, Tensor, Tensor]:
        sp = torch.nn.functional.softplus
        return sp(self.raw_alpha), sp(self.raw_beta), sp(self.raw_gamma)

    def _split(self, mv: Tensor, s: Tensor) -> tuple[Tensor, Tensor]:
        n = mv.shape[0]
        h = self.heads
        mv = mv.reshape(n, h, self.n_mv // h, 16).transpose(0, 1)
        s = s.reshape(n, h, self.n_s // h).transpose(0, 1)
        return mv, s

    def weights(self, x: TokenSet, kv: TokenSet, rope_q: Tensor | None = None, rope_k: Tensor | None = None) -> Tensor:
        q_mv, q_s = self._split(*self.q(x.mv, x.s))
        k_mv, k_s = self._split(*self.k(kv.mv, kv.s))
        q_s, k_s = rope_rotate(q_s, rope_q), rope_rotate(k_s, rope_k)
        return softmax(attention_logits(q_mv, k_mv, q_s, k_s, *self.coefficients()), axis=-1)

    def forward(self, x: TokenSet, kv: TokenSet, rope_q: Tensor | None = None, rope_k: Tensor | None = None) -> TokenSet:
        w = self.weights(x, kv, rope_q, rope_k)  # [H, Nq, Nk]
        v_mv, v_s = self._split(*self.v(kv.mv, kv.s))
        out_mv = torch.einsum("hqk,hkcj->qhcj", w, v_mv).reshape(len(x), self.n_mv, 16)
        out_s = torch.einsum("hqk,hkc->qhc", w, v_s).reshape(len(x), self.n_s)
        mv, s = self.out(out_mv, out_s)
        return TokenSet(mv, s)


def check_anchors(anchor_idx, n: int) -> Tensor:
    idx = torch.as_tensor(anchor_idx, dtype=torch.long).reshape(-1)
    if idx.numel() == 0:
        raise EmptyAnchors("anchor index list is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexOutOfRange(f"anchor index outside [0, {n})")
    if torch.unique(idx).numel() != idx.numel():
        raise DuplicateAnchor("anchor index list contains duplicates")
    return idx


def geometric_self_attention(x: TokenSet, attn: GeometricAttention) -> TokenSet:
    return attn(x, x)


def geometric_anchor_attention(x: TokenSet, anchor_idx, attn: GeometricAttention) -> TokenSet:
    """Queries from every token, keys and values only from the anchors."""
    idx = check_anchors(anchor_idx, len(x))
    return attn(x, x.index(idx))


# --- blocks -------------------------------------------------------------------------------


class GeometricBilinear(nn.Module):
    def __init__(self, hidden_mv: int, out_mv: int):
        super().__init__()
        self.mix = EquiLinear(hidden_mv, out_mv)

    def forward(self, x: Tensor, y: Tensor, reference: Tensor) -> Tensor:
        return self.mix(bilinear_halves(x, y, reference))[0]


class EquiMLP(nn.Module):
    """norm -> linear -> bilinear -> gate -> linear, scalars carried alongside."""

    def __init__(self, n_mv: int, n_s: int, hidden_mv: int, hidden_s: int):
        super().__init__()
        self.hidden_mv = hidden_mv
        self.inp = EquiLinear(n_mv, 2 * hidden_mv, n_s, hidden_s)
        self.bilinear = GeometricBilinear(hidden_mv, hidden_mv)
        self.out = EquiLinear(hidden_mv, n_mv, hidden_s, n_s)

    def forward(self, x: TokenSet) -> TokenSet:
        reference = x.mv.mean(dim=-2)
        normed = token_layer_norm(x)
        h, hs = self.inp(normed.mv, normed.s)
        h = self.bilinear(h[:, : self.hidden_mv], h[:, self.hidden_mv :], reference)
        h = gated_nonlinearity(h)
        mv, s = self.out(h, gelu(hs))
        return TokenSet(mv, s)


def mv_dropout(x: TokenSet, p: float, training: bool) -> TokenSet:
    """Zero whole multivector channels and individual scalars; identity when ``p == 0`` or eval."""
    if not training or p <= 0:
        return x
    keep_mv = (torch.rand(x.mv.shape[:-1], device=x.mv.device) >= p).to(x.mv.dtype).unsqueeze(-1)
    keep_s = (torch.rand(x.s.shape, device=x.s.device) >= p).to(x.s.dtype)
    return TokenSet(x.mv * keep_mv / (1 - p), x.s * keep_s / (1 - p))


class GeometricBlock(nn.Module):
    """Pre-norm residual block: cross/anchor attention followed by an equivariant MLP."""

    def __init__(self, n_mv: int, n_s: int, heads: int, hidden_mv: int, hidden_s: int, dropout: float = 0.0):
        super().__init__()
        self.attn = GeometricAttention(n_mv, n_s, heads)
        self.mlp = EquiMLP(n_mv, n_s, hidden_mv, hidden_s)
        self.dropout = dropout

    def forward(self, x: TokenSet, kv: TokenSet) -> TokenSet:
        """``kv`` holds the raw (un-normalised) key/value tokens."""
        a = self.attn(token_layer_norm(x), token_layer_norm(kv))
        a = mv_dropout(a, self.dropout, self.training)
        x = TokenSet(x.mv + a.mv, x.s + a.s)
        m = mv_dropout(self.mlp(x), self.dropout, self.training)
        return TokenSet(x.mv + m.mv, x.s + m.s)
