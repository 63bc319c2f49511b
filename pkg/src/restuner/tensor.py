"""Dense float64 tensors with reverse-mode autodiff.

The graph is define-by-run: every op links its output to its inputs and
stores a backward closure. ``backward`` on a scalar walks the recorded
graph once in reverse topological order. A finite-difference oracle
(`finite_diff_grad`) is provided for independent gradient verification;
it never touches autodiff state.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf_np

_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness assertions on every op output (debug mode)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    """N-d float64 value, optionally participating in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- graph plumbing -------------------------------------------------

    def backward(self) -> None:
        """Fill ``grad`` on every requires_grad tensor this scalar depends on.

        Repeated calls without re-recording produce identical grads: each
        call resets the grads of all reachable nodes before accumulating.
        """
        if self.data.size != 1:
            raise GradientError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(-self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / float(other))
        return mul(self, power(other, -1.0))

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose_last2(self):
        return transpose_last2(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise GradientError("non-finite value produced in forward op")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data
    out = _make(out_data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.data.shape)

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    out._backward = backward
    return out


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out = _make(a.data * s, (a,), None)

    def backward():
        a.grad += out.grad * s

    out._backward = backward
    return out


def power(a: Tensor, p: float) -> Tensor:
    out = _make(a.data**p, (a,), None)

    def backward():
        a.grad += out.grad * p * a.data ** (p - 1.0)

    out._backward = backward
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + _erf_np(a.data / math.sqrt(2.0)))
    out = _make(a.data * phi_cdf, (a,), None)

    def backward():
        a.grad += out.grad * _gelu_grad(a.data)

    out._backward = backward
    return out


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + _erf_np(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


# -- structural ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(a.data.swapaxes(-1, -2) @ out.grad, b.data.shape)

    out._backward = backward
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} (size {a.data.size}) to {shape}")
    out = _make(a.data.reshape(shape), (a,), None)

    def backward():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward = backward
    return out


def permute(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {a.data.ndim}")
    inverse = tuple(np.argsort(axes))
    out = _make(a.data.transpose(axes), (a,), None)

    def backward():
        a.grad += out.grad.transpose(inverse)

    out._backward = backward
    return out


def transpose_last2(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    out = _make(a.data[idx], (a,), None)

    def backward():
        np.add.at(a.grad, idx, out.grad)

    out._backward = backward
    return out


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.data.ndim
                sl[axis] = slice(int(lo), int(hi))
                t.grad += out.grad[tuple(sl)]

    out._backward = backward
    return out


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    out = _make(np.broadcast_to(a.data, shape).copy(), (a,), None)

    def backward():
        a.grad += _unbroadcast(out.grad, a.data.shape)

    out._backward = backward
    return out


# -- reductions ---------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.grad += np.broadcast_to(g, a.data.shape)

    out._backward = backward
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul_scalar(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- softmax ------------------------------------------------------------


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis (max-subtraction)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (a,), None)

    def backward():
        g = out.grad
        a.grad += y * (g - (g * y).sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted-scaling dropout; identity when p == 0 or in eval mode."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(mask))


# -- oracle -------------------------------------------------------------


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, elementwise.

    Independent of autodiff: only perturbs x.data and reads f's value.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    x_flat = x.data.reshape(-1)
    for i in range(base.size):
        orig = x_flat[i]
        x_flat[i] = orig + h
        f_plus = _scalar_value(f(x))
        x_flat[i] = orig - h
        f_minus = _scalar_value(f(x))
        x_flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise GradientError("non-finite evaluation in finite-difference oracle")
        flat[i] = (f_plus - f_minus) / (2.0 * h)
    x.data[...] = base
    return grad


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| scaled by the largest magnitude present in either array."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-12)
    return float(np.abs(a - b).max(initial=0.0)) / denom
