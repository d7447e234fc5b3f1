"""Projective geometric algebra G(3,0,1) on 16-component coefficient tensors.

Multivectors are tensors whose last axis holds 16 coefficients in the order

    index  0      : 1
    index  1..4   : e0, e1, e2, e3
    index  5..10  : e01, e02, e03, e12, e13, e23
    index 11..14  : e012, e013, e023, e123
    index 15      : e0123

with e0^2 = 0 and e1^2 = e2^2 = e3^2 = 1.

Geometric conventions
---------------------
* A plane with unit normal ``n`` and offset ``d`` is ``d e0 + n1 e1 + n2 e2 + n3 e3``.
* A point ``p`` is ``e123 - p1 e023 + p2 e013 - p3 e012``.  These signs are the
  only assignment under which points and plane normals rotate with the same
  matrix; see :func:`embed_point`.
* The dual is the right complement: ``dual(e_A) = s_A e_{A^c}`` where ``s_A`` is
  the sign of the permutation ``(A, A^c)`` of ``(0, 1, 2, 3)``.
* An odd versor ``v`` acts as ``v x^ v~`` (``x^`` the grade involution), an even
  versor as ``v x v~``.  Versors produced here are normalised so ``v v~ = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from equiflow.errors import DegeneratePoint, NonOrthogonal

BLADES: tuple[tuple[int, ...], ...] = (
    (),
    (0,), (1,), (2,), (3,),
    (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3),
    (0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3),
    (0, 1, 2, 3),
)
GRADE_SLICES = (slice(0, 1), slice(1, 5), slice(5, 11), slice(11, 15), slice(15, 16))
GRADES = np.array([len(b) for b in BLADES])
# Components whose blade does not contain e0.
EUCLIDEAN_IDX = [i for i, b in enumerate(BLADES) if 0 not in b]

POINT_EPS = 1e-9

_MASKS = [sum(1 << g for g in b) for b in BLADES]
_MASK_TO_INDEX = {m: i for i, m in enumerate(_MASKS)}


def _reorder_sign(a: int, b: int) -> int:
    # Number of generator swaps needed to merge bitmask blades a and b into canonical order.
    a >>= 1
    swaps = 0
    while a:
        swaps += bin(a & b).count("1")
        a >>= 1
    return -1 if swaps & 1 else 1


@lru_cache(maxsize=None)
def _tables() -> tuple[np.ndarray, np.ndarray]:
    gp = np.zeros((16, 16, 16))
    wedge = np.zeros((16, 16, 16))
    for i, a in enumerate(_MASKS):
        for j, b in enumerate(_MASKS):
            k = _MASK_TO_INDEX[a ^ b]
            sign = _reorder_sign(a, b)
            if not a & b:
                wedge[i, j, k] = sign
            if a & b & 1:  # shared e0 squares to zero
                continue
            gp[i, j, k] = sign
    return gp, wedge


@lru_cache(maxsize=None)
def _dual_table() -> tuple[np.ndarray, np.ndarray]:
    perm = np.zeros(16, dtype=np.int64)
    signs = np.zeros(16)
    full = 0b1111
    for i, a in enumerate(_MASKS):
        perm[i] = _MASK_TO_INDEX[full ^ a]
        signs[i] = _reorder_sign(a, full ^ a)
    return perm, signs


def cayley_table() -> np.ndarray:
    """Dense ``[16, 16, 16]`` table with ``(a b)_k = sum_ij a_i b_j G[i, j, k]``."""
    return _tables()[0].copy()


def wedge_table() -> np.ndarray:
    return _tables()[1].copy()


def _table(which: int, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(_tables()[which].reshape(256, 16), dtype=like.dtype, device=like.device)


def _bilinear(a: torch.Tensor, b: torch.Tensor, which: int) -> torch.Tensor:
    a, b = torch.broadcast_tensors(a, b)
    outer = a.unsqueeze(-1) * b.unsqueeze(-2)
    return outer.reshape(*outer.shape[:-2], 256) @ _table(which, outer)


def geometric_product(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _bilinear(a, b, 0)


def outer_product(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _bilinear(a, b, 1)


def dual(x: torch.Tensor) -> torch.Tensor:
    perm, signs = _dual_table()
    out = torch.empty_like(x)
    out[..., perm] = x * torch.as_tensor(signs, dtype=x.dtype, device=x.device)
    return out


def join(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Regressive product ``dual(dual(a) ^ dual(b))``.

    Commutes with even versors; an odd versor flips its sign.
    """
    return dual(outer_product(dual(a), dual(b)))


def _grade_signs(like: torch.Tensor, signs_by_grade) -> torch.Tensor:
    return torch.as_tensor([signs_by_grade[g] for g in GRADES], dtype=like.dtype, device=like.device)


def reverse(x: torch.Tensor) -> torch.Tensor:
    return x * _grade_signs(x, (1, 1, -1, -1, 1))


def grade_involution(x: torch.Tensor) -> torch.Tensor:
    return x * _grade_signs(x, (1, -1, 1, -1, 1))


def grade_project(x: torch.Tensor, k: int) -> torch.Tensor:
    out = torch.zeros_like(x)
    out[..., GRADE_SLICES[k]] = x[..., GRADE_SLICES[k]]
    return out


def invariant_inner(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a[..., EUCLIDEAN_IDX] * b[..., EUCLIDEAN_IDX]).sum(-1)


# --- embeddings ---------------------------------------------------------------------------


def _payload(values, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(values, dtype=float), dtype=dtype)


def embed_scalar(s) -> torch.Tensor:
    s = _payload(s)
    out = torch.zeros(*s.shape, 16, dtype=s.dtype, device=s.device)
    out[..., 0] = s
    return out


def embed_plane(normal, offset=0.0) -> torch.Tensor:
    normal = _payload(normal)
    offset = torch.as_tensor(offset, dtype=normal.dtype, device=normal.device)
    out = torch.zeros(*normal.shape[:-1], 16, dtype=normal.dtype, device=normal.device)
    out[..., 1] = offset
    out[..., 2:5] = normal
    return out


def embed_point(coords) -> torch.Tensor:
    """Trivector of a Euclidean point, with ``x_123 = 1``.

    Coordinates go to ``(x_012, x_013, x_023) = (-p3, p2, -p1)``; the e0-trivector
    slot paired with each axis is the complement of that axis' plane normal.
    """
    p = _payload(coords)
    out = torch.zeros(*p.shape[:-1], 16, dtype=p.dtype, device=p.device)
    out[..., 11] = -p[..., 2]
    out[..., 12] = p[..., 1]
    out[..., 13] = -p[..., 0]
    out[..., 14] = 1.0
    return out


def embed_translation(t) -> torch.Tensor:
    """Even versor translating every embedded point by ``t``."""
    t = _payload(t)
    out = torch.zeros(*t.shape[:-1], 16, dtype=t.dtype, device=t.device)
    out[..., 0] = 1.0
    out[..., 5:8] = -0.5 * t
    return out


def embed(kind: str, payload, offset=0.0) -> torch.Tensor:
    if kind == "scalar":
        return embed_scalar(payload)
    if kind == "plane":
        return embed_plane(payload, offset)
    if kind == "point":
        return embed_point(payload)
    if kind == "translation":
        return embed_translation(payload)
    raise ValueError(f"unknown embedding kind {kind!r}")


def extract_scalar(x: torch.Tensor) -> torch.Tensor:
    return x[..., 0]


def extract_vector(x: torch.Tensor) -> torch.Tensor:
    """Plane-normal read-out: rotates with the motion, ignores translations."""
    return x[..., 2:5]


def point_coordinates(x: torch.Tensor) -> torch.Tensor:
    """Unnormalised ``(p1, p2, p3)`` numerators of the point trivector."""
    return torch.stack([-x[..., 13], x[..., 12], -x[..., 11]], dim=-1)


def extract_point(x: torch.Tensor, eps: float = POINT_EPS) -> torch.Tensor:
    w = x[..., 14]
    if torch.any(w.abs() <= eps):
        raise DegeneratePoint(f"homogeneous coordinate below {eps:g}")
    return point_coordinates(x) / w.unsqueeze(-1)


def extract(kind: str, x: torch.Tensor) -> torch.Tensor:
    if kind == "scalar":
        return extract_scalar(x)
    if kind == "vector":
        return extract_vector(x)
    if kind == "point":
        return extract_point(x)
    raise ValueError(f"unknown extraction kind {kind!r}")


# --- rigid motions ------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidMotion:
    """``x -> rotation @ x + translation``; ``rotation`` may be improper."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidMotion:
        return cls(np.eye(3), np.zeros(3))

    @property
    def is_reflection(self) -> bool:
        return bool(np.linalg.det(self.rotation) < 0)

    def check(self, tol: float = 1e-12) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > tol:
            raise NonOrthogonal(f"rotation deviates from orthogonal by {err:.3g}")

    def apply_points(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.translation

    def apply_vectors(self, v: np.ndarray) -> np.ndarray:
        return v @ self.rotation.T

    def inverse(self) -> RigidMotion:
        rt = self.rotation.T
        return RigidMotion(rt, -rt @ self.translation)

    def compose(self, inner: RigidMotion) -> RigidMotion:
        """Motion applying ``inner`` first, then ``self``."""
        return RigidMotion(self.rotation @ inner.rotation, self.rotation @ inner.translation + self.translation)


@dataclass(frozen=True)
class Versor:
    mv: torch.Tensor
    odd: bool

    def __matmul__(self, other: Versor) -> Versor:
        return Versor(geometric_product(self.mv, other.mv), self.odd ^ other.odd)


def rotor_from_matrix(rotation: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    qx, qy, qz, qw = Rotation.from_matrix(rotation).as_quat()
    out = torch.zeros(16, dtype=dtype)
    out[0] = qw
    out[8] = -qz  # e12
    out[9] = qy  # e13
    out[10] = -qx  # e23
    return out


def versor_from_motion(m: RigidMotion, dtype=torch.float64) -> Versor:
    m.check()
    rot = m.rotation
    odd = m.is_reflection
    if odd:
        # Peel off the reflection through the xy-plane, whose versor is e3.
        rot = rot @ np.diag([1.0, 1.0, -1.0])
    v = geometric_product(embed_translation(torch.as_tensor(m.translation, dtype=dtype)), rotor_from_matrix(rot, dtype))
    if odd:
        e3 = torch.zeros(16, dtype=dtype)
        e3[4] = 1.0
        v = geometric_product(v, e3)
    return Versor(v, odd)


def sandwich(v: Versor, x: torch.Tensor) -> torch.Tensor:
    mv = v.mv.to(dtype=x.dtype, device=x.device)
    if v.odd:
        x = grade_involution(x)
    return geometric_product(geometric_product(mv, x), reverse(mv))


def sandwich_matrix(v: Versor, dtype=torch.float64) -> torch.Tensor:
    """``[16, 16]`` matrix ``S`` with ``sandwich(v, x) = x @ S.T``."""
    eye = torch.eye(16, dtype=dtype)
    return sandwich(v, eye).T
