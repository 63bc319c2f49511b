"""Neural layers used by the backbone and the tuner zoo.

Parameters carry a trainable flag so a frozen backbone and its trainable
tuners can live in one graph; only trainable parameters receive grads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    """Named tensor with a trainable flag. Frozen params take no grads."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag
        self.grad = np.zeros_like(self.data) if flag else None


class Module:
    """Minimal container: discovers parameters by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)


# -- init helpers -------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (ViT-style init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def kaiming_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    """Kaiming-uniform with negative slope a = sqrt(5).

    gain^2 = 2 / (1 + a^2) = 1/3, bound = sqrt(3) * gain / sqrt(fan_in)
    = sqrt(1 / fan_in). fan_in is the input width d_in.
    """
    bound = math.sqrt(1.0 / d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class LinearLayer(Module):
    """y = x @ W (+ b). W is [d_in, d_out]."""

    def __init__(self, W: np.ndarray, b=None, trainable: bool = True):
        self.W = Parameter(W, trainable=trainable)
        self.b = Parameter(b, trainable=trainable) if b is not None else None

    @property
    def d_in(self) -> int:
        return self.W.data.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.data.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(
                f"linear expects trailing dim {self.d_in}, got input shape {x.shape}"
            )
        y = x @ self.W
        if self.b is not None:
            y = y + self.b
        return y

    __call__ = forward


def make_linear(
    rng: np.random.Generator,
    d_in: int,
    d_out: int,
    bias: bool = True,
    std: float = 0.02,
    trainable: bool = True,
) -> LinearLayer:
    W = trunc_normal(rng, (d_in, d_out), std=std)
    b = np.zeros(d_out) if bias else None
    return LinearLayer(W, b, trainable=trainable)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, trainable: bool = True):
        self.gamma = Parameter(np.ones(dim), trainable=trainable)
        self.beta = Parameter(np.zeros(dim), trainable=trainable)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    __call__ = forward


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * gamma + beta


@dataclass
class MHAConfig:
    dim: int
    heads: int
    qkv_bias: bool = True
    attn_drop: float = 0.0
    proj_drop: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        for p in (self.attn_drop, self.proj_drop):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"dropout probability {p} outside [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention with a fused QKV projection.

    forward returns (output, per-head query) — the query is consumed by
    prefix/prompt tuners, which reuse the backbone's query stream.
    """

    def __init__(self, cfg: MHAConfig, rng: np.random.Generator, trainable: bool = True):
        self.cfg = cfg
        self.qkv = make_linear(rng, cfg.dim, 3 * cfg.dim, bias=cfg.qkv_bias, trainable=trainable)
        self.proj = make_linear(rng, cfg.dim, cfg.dim, bias=True, trainable=trainable)

    def forward(self, x: Tensor, rng=None, training: bool = False):
        cfg = self.cfg
        B, N, dim = x.shape
        if dim != cfg.dim:
            raise ShapeError(f"MHA expects width {cfg.dim}, got input shape {x.shape}")
        qkv = self.qkv(x).reshape(B, N, 3, cfg.heads, cfg.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose_last2()) * (cfg.head_dim**-0.5)
        attn = T.softmax_lastdim(attn)
        attn = T.dropout(attn, cfg.attn_drop, rng, training)
        y = (attn @ v).permute(0, 2, 1, 3).reshape(B, N, dim)
        y = self.proj(y)
        y = T.dropout(y, cfg.proj_drop, rng, training)
        return y, q

    __call__ = forward


class MLP(Module):
    """Transformer FFN: linear -> GELU -> linear, hidden = ratio * dim."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4, trainable: bool = True):
        hidden = ratio * dim
        self.fc1 = make_linear(rng, dim, hidden, trainable=trainable)
        self.fc2 = make_linear(rng, hidden, dim, trainable=trainable)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    __call__ = forward
