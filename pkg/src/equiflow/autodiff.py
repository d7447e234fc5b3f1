"""Tensor primitives, reverse-mode gradients and a finite-difference gradient checker.

Tensors are ``torch.Tensor``; the tape is torch's autograd graph.  This module pins the
primitive set the models use (exact-erf gelu, shift-stabilised softmax, a sign with
zero gradient) and validates shapes and indices up front so failures surface as
package errors rather than deep inside a kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from equiflow.errors import IndexOutOfRange, NotScalarLoss, ShapeMismatch

Tensor = torch.Tensor

PRECISIONS = {"single": torch.float32, "double": torch.float64}


def dtype_of(precision: str) -> torch.dtype:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}") from None


def tensor(data, requires_grad: bool = False, precision: str = "double") -> Tensor:
    return torch.tensor(data, dtype=dtype_of(precision), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeMismatch(f"matmul of {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def _same_shape(op: Callable[[Tensor, Tensor], Tensor]) -> Callable[[Tensor, Tensor], Tensor]:
    def wrapped(a, b):
        if isinstance(a, Tensor) and isinstance(b, Tensor):
            try:
                torch.broadcast_shapes(a.shape, b.shape)
            except RuntimeError:
                raise ShapeMismatch(f"{op.__name__} of {tuple(a.shape)} and {tuple(b.shape)}") from None
        return op(a, b)

    wrapped.__name__ = op.__name__
    return wrapped


add = _same_shape(torch.add)
sub = _same_shape(torch.sub)
mul = _same_shape(torch.mul)
div = _same_shape(torch.div)


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def sign_stopgrad(x: Tensor) -> Tensor:
    return torch.sign(x.detach())


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = torch.as_tensor(indices, dtype=torch.long)
    n = x.shape[axis]
    if idx.numel() and (idx.min() < -n or idx.max() >= n):
        raise IndexOutOfRange(f"index outside [0, {n}) on axis {axis}")
    return torch.index_select(x, axis, idx % n if idx.numel() else idx)


def concat(tensors, axis: int = 0) -> Tensor:
    try:
        return torch.cat(list(tensors), dim=axis)
    except RuntimeError as exc:
        raise ShapeMismatch(str(exc)) from None


def reshape(x: Tensor, shape) -> Tensor:
    try:
        return x.reshape(shape)
    except RuntimeError as exc:
        raise ShapeMismatch(str(exc)) from None


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": torch.exp,
    "tanh": torch.tanh,
    "gelu": gelu,
    "sign_stopgrad": sign_stopgrad,
    "sum": lambda x, axis=None: x.sum() if axis is None else x.sum(dim=axis),
    "mean": lambda x, axis=None: x.mean() if axis is None else x.mean(dim=axis),
    "max": lambda x, axis=None: x.max() if axis is None else x.amax(dim=axis),
    "softmax": softmax,
    "gather": gather,
    "concat": concat,
    "slice": lambda x, key: x[key],
    "reshape": reshape,
    "power": torch.pow,
    "sqrt": torch.sqrt,
}


def forward_primitive(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*args, **kwargs)


def backward(loss: Tensor, leaves) -> list[Tensor]:
    """Gradients of a scalar ``loss`` for each leaf; leaves outside the graph get zeros."""
    if loss.numel() != 1:
        raise NotScalarLoss(f"loss has shape {tuple(loss.shape)}")
    leaves = list(leaves)
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple[int, ...] | None
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, atol: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    Coordinates are visited in row-major order.  The per-coordinate error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, atol * max(1, max|numeric|))``,
    the floor keeping entries that are zero up to truncation error from dominating.
    At ``h = 1e-5`` a central difference of an O(1) double-precision function resolves
    gradients only to about ``1e-11``, so a floor of ``1e-6`` of the largest entry keeps
    rounding noise near ``1e-5`` relative.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    (analytic,) = backward(f(x), [x])
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().reshape(-1).clone()
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f(flat.reshape(x.shape)).item()
            flat[i] = orig - h
            fm = f(flat.reshape(x.shape)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)

    floor = atol * max(1.0, numeric.abs().max().item()) if numeric.numel() else atol
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor, dtype=torch.float64))
    rel = (analytic - numeric).abs() / denom
    if rel.numel() == 0:
        return GradCheckReport(0.0, None, 0)
    worst = int(torch.argmax(rel))
    index = tuple(int(i) for i in torch.unravel_index(torch.tensor(worst), x.shape))
    return GradCheckReport(float(rel[worst]), index, rel.numel())
