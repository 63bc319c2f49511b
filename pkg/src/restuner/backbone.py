"""Frozen ViT-style encoder: patch embed, pre-norm blocks, classifier head.

The backbone plays the role of the pre-trained operation set; tuners are
added in parallel to MHA / FFN / whole-block outputs. Position embeddings
are fixed sinusoidal so the frozen model carries no trainable residue —
the trainable set is exactly tuners + head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    LayerNorm,
    LinearLayer,
    MHAConfig,
    Module,
    MultiHeadAttention,
    MLP,
    Parameter,
    make_linear,
    trunc_normal,
)
from .tensor import ShapeError, Tensor
from .tuners import ATTACH_OPS


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    dim: int = 16
    depth: int = 2
    heads: int = 2
    patch: int = 4
    image_size: int = 8
    in_channels: int = 1
    num_classes: int = 4
    seed: int = 0
    qkv_bias: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch {self.patch}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1  # class token


class Block(Module):
    """Pre-norm transformer block: x + MHA(n1(x)), then u + FFN(n2(u))."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.dim)
        self.mha = MultiHeadAttention(MHAConfig(cfg.dim, cfg.heads, qkv_bias=cfg.qkv_bias), rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = MLP(cfg.dim, rng, ratio=cfg.mlp_ratio)


def sinusoidal_positions(n: int, dim: int, scale: float = 0.02) -> np.ndarray:
    """Fixed sin/cos position table [n, dim].

    Scaled down to the same magnitude as the 0.02-std projections so the
    position signal does not drown the patch content at desk scale.
    """
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return scale * table


class ModelGraph(Module):
    """Backbone + attached tuners + classifier head."""

    def __init__(self, cfg: BackboneConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        patch_dim = cfg.in_channels * cfg.patch * cfg.patch
        self.patch_embed = make_linear(rng, patch_dim, cfg.dim)
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, cfg.dim)))
        self.pos = sinusoidal_positions(cfg.tokens, cfg.dim)  # fixed, not a Parameter
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.final_norm = LayerNorm(cfg.dim)
        self.head = make_linear(rng, cfg.dim, cfg.num_classes)
        self.tuners: dict[tuple[int, str], Module] = {}
        self.training = False
        self.drop_rng = np.random.default_rng(cfg.seed + 1)

    # tuners is a plain dict, so extend the attribute walk
    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        for (block, op), tuner in sorted(
            self.tuners.items(), key=lambda kv: (kv[0][0], ATTACH_OPS.index(kv[0][1]))
        ):
            yield from tuner.named_parameters(f"{prefix}tuners.{block}.{op}.")

    def train_mode(self) -> None:
        self.training = True

    def eval_mode(self) -> None:
        self.training = False

    def forward(self, images: Tensor) -> Tensor:
        return forward(self, images)

    __call__ = forward


def build_backbone(cfg: BackboneConfig) -> ModelGraph:
    """Deterministically seeded model; backbone frozen, head trainable."""
    model = ModelGraph(cfg)
    freeze_all(model)
    return model


def freeze_all(model: ModelGraph) -> None:
    """Freeze every backbone parameter; head and tuners stay trainable."""
    for module in (model.patch_embed, model.final_norm, *model.blocks):
        module.set_trainable(False)
    model.cls_token.set_trainable(False)


def unfreeze_backbone(model: ModelGraph) -> None:
    for module in (model.patch_embed, model.final_norm, *model.blocks):
        module.set_trainable(True)
    model.cls_token.set_trainable(True)


def trainable_parameters(model: ModelGraph):
    """(name, param) pairs for trainable params, stable-ordered by name."""
    return sorted(
        ((n, p) for n, p in model.named_parameters() if p.trainable),
        key=lambda np_: np_[0],
    )


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B,C,H,W] -> [B, num_patches, C*patch*patch], row-major patch order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # B, gh, gw, C, p, p
    return x.reshape(B, gh * gw, C * patch * patch)


def _tuner_delta(model: ModelGraph, tuner, x_in: Tensor, q, block: Block) -> Tensor:
    if tuner.kind in ("res_attn", "adapter"):
        return tuner(x_in, rng=model.drop_rng, training=model.training)
    if tuner.kind == "prefix":
        return tuner(q, rng=model.drop_rng, training=model.training)
    if tuner.kind == "prompt":
        return tuner(q, block.mha, rng=model.drop_rng, training=model.training)
    raise ShapeError(f"unknown tuner kind {tuner.kind!r}")


def block_forward(model: ModelGraph, index: int, x: Tensor) -> Tensor:
    """One pre-norm block with any tuners attached at its slots.

    MHA/FFN tuners consume the post-norm tensor fed to the parallel op;
    the block tuner consumes the block's raw input and adds to its output.
    Prefix/prompt tuners always reuse this block's MHA query.
    """
    block = model.blocks[index]
    h1 = block.norm1(x)
    mha_out, q = block.mha(h1, rng=model.drop_rng, training=model.training)
    u = x + mha_out
    tuner = model.tuners.get((index, "mha"))
    if tuner is not None:
        u = u + _tuner_delta(model, tuner, h1, q, block)

    h2 = block.norm2(u)
    y = u + block.mlp(h2)
    tuner = model.tuners.get((index, "ffn"))
    if tuner is not None:
        y = y + _tuner_delta(model, tuner, h2, q, block)

    tuner = model.tuners.get((index, "block"))
    if tuner is not None:
        y = y + _tuner_delta(model, tuner, x, q, block)
    return y


def forward(model: ModelGraph, images: Tensor) -> Tensor:
    """Patch-embed -> blocks -> final norm -> class token -> head logits."""
    cfg = model.cfg
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if data.ndim != 4 or data.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"expected images [B,{cfg.in_channels},{cfg.image_size},{cfg.image_size}], got {data.shape}"
        )
    B = data.shape[0]
    patches = Tensor(patchify(data, cfg.patch))
    x = model.patch_embed(patches)
    from .tensor import broadcast_to, concat

    cls = broadcast_to(model.cls_token, (B, 1, cfg.dim))
    x = concat([cls, x], axis=1)
    x = x + Tensor(model.pos[None, :, :])
    for i in range(cfg.depth):
        x = block_forward(model, i, x)
    x = model.final_norm(x)
    return model.head(x[:, 0, :])


def total_param_count(model: ModelGraph) -> int:
    """All parameters, frozen and trainable (fixed position table excluded)."""
    return sum(p.data.size for _, p in model.named_parameters())
