"""Dense float64 kernels with hand-written backward passes.

Every forward op has a matching backward that the test suite checks
against central finite differences. Kernels are pure functions of their
inputs; nothing is cached between calls, so results are bitwise
reproducible across runs.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


def as_tensor(data, shape=None) -> Tensor:
    """Coerce to a C-ordered float64 array and reject non-finite entries."""
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("tensor contains non-finite entries")
    return arr


@dataclass
class Param:
    """A value/grad pair. Frozen params never accumulate gradient or move."""

    value: Tensor
    grad: Tensor = field(repr=False, default=None)  # type: ignore[assignment]
    frozen: bool = False

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError("grad shape must match value shape")

    @classmethod
    def of(cls, value, frozen: bool = False) -> "Param":
        return cls(as_tensor(value), frozen=frozen)

    def accumulate(self, g: Tensor) -> None:
        if not self.frozen:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def sgd_step(self, lr: float) -> None:
        if not self.frozen:
            self.value -= lr * self.grad

    def freeze(self) -> None:
        self.frozen = True
        self.zero_grad()


# ---------------------------------------------------------------------------
# Multiply-add instrumentation. Tests compare symbolic FLOP formulas against
# the counts recorded here; counting never changes op results.
# ---------------------------------------------------------------------------

_MAC_BOXES: list[list[int]] = []


@contextmanager
def count_macs():
    """Collect multiply-add counts of every matmul run inside the context."""
    box = [0]
    _MAC_BOXES.append(box)
    try:
        yield box
    finally:
        _MAC_BOXES.remove(box)


def _note_macs(n: int) -> None:
    for box in _MAC_BOXES:
        box[0] += n


# ---------------------------------------------------------------------------
# Forward / backward kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    _note_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def matmul_backward(grad_out: Tensor, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    _note_macs(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return grad_out @ b.T, a.T @ grad_out


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along rows, computed with max-subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"row_softmax needs a 2-D input, got {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_backward(grad_out: Tensor, out: Tensor) -> Tensor:
    inner = (grad_out * out).sum(axis=1, keepdims=True)
    return out * (grad_out - inner)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    out, _ = layer_norm_with_cache(x, gamma, beta, eps)
    return out


def layer_norm_with_cache(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Per-row normalization with population variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std)


def layer_norm_backward(grad_out: Tensor, cache, gamma: Tensor):
    xhat, inv_std = cache
    dxhat = grad_out * gamma
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    dgamma = (grad_out * xhat).sum(axis=0)
    dbeta = grad_out.sum(axis=0)
    return dx, dgamma, dbeta


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    out, _ = attention_with_cache(q, k, v)
    return out


def attention_with_cache(q: Tensor, k: Tensor, v: Tensor):
    """Scaled dot-product attention: row_softmax(q k^T / sqrt(d)) v."""
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention needs equal 2-D shapes, got "
                         f"{q.shape}/{k.shape}/{v.shape}")
    scale = 1.0 / np.sqrt(q.shape[1])
    scores = matmul(q, k.T) * scale
    weights = row_softmax(scores)
    out = matmul(weights, v)
    return out, (q, k, v, weights, scale)


def attention_backward(grad_out: Tensor, cache):
    q, k, v, weights, scale = cache
    dv = matmul(weights.T, grad_out)
    dweights = matmul(grad_out, v.T)
    dscores = row_softmax_backward(dweights, weights) * scale
    dq = matmul(dscores, k)
    dk = matmul(dscores.T, q)
    return dq, dk, dv


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def fd_check(f, x: Tensor, analytic: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between `analytic` and central differences of f at x.

    f must be a scalar function of a tensor shaped like x. Relative error
    per coordinate is |a - n| / max(|a|, |n|, 1e-6).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError("analytic gradient shape must match x")
    worst = 0.0
    flat_grad = analytic.reshape(-1)
    for i in range(x.size):
        bump = np.zeros(x.size)
        bump[i] = eps
        fp = float(f((x.reshape(-1) + bump).reshape(x.shape)))
        fm = float(f((x.reshape(-1) - bump).reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("objective returned a non-finite value")
        numeric = (fp - fm) / (2.0 * eps)
        a = float(flat_grad[i])
        denom = max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
