"""Toy-scale ViT image encoder with per-layer outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .module import Module, Parameter
from .tensor import Tensor

INIT_STD = 0.02
LN_EPS = 1e-6


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 4.0
    in_channels: int = 3

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.mlp_ratio <= 0 or int(self.embed_dim * self.mlp_ratio) != self.embed_dim * self.mlp_ratio:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} must give an integral hidden width")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def _normal(rng, *shape):
    return rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)


class PatchEmbed(Module):
    """Strided p x p projection; weight laid out as [c, C_in * p * p] (channel, row, col)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        c, p = cfg.embed_dim, cfg.patch_size
        self.weight = Parameter(_normal(rng, c, cfg.in_channels * p * p))
        self.bias = Parameter(np.zeros(c))
        self.pos = Parameter(_normal(rng, cfg.num_tokens, c))


def patchify(image: Tensor, patch: int) -> Tensor:
    """[B, C, S, S] -> [B, (S/p)^2, C*p*p], tokens in row-major grid order."""
    B, C, H, W = image.shape
    g_h, g_w = H // patch, W // patch
    x = image.reshape(B, C, g_h, patch, g_w, patch)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g_h * g_w, C * patch * patch)


def patch_embed(image: Tensor, embed: PatchEmbed, cfg: BackboneConfig) -> Tensor:
    S = cfg.image_size
    if image.ndim != 4 or image.shape[1] != cfg.in_channels or image.shape[2:] != (S, S):
        raise DimensionError(
            f"patch_embed expects [B, {cfg.in_channels}, {S}, {S}], got {image.shape}")
    tokens = T.linear(patchify(image, cfg.patch_size), embed.weight, embed.bias)
    return tokens + embed.pos


class EncoderBlock(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        c, m = cfg.embed_dim, cfg.mlp_dim
        self.heads = cfg.heads
        self.ln1_gamma = Parameter(np.ones(c))
        self.ln1_beta = Parameter(np.zeros(c))
        self.q_weight = Parameter(_normal(rng, c, c))
        self.q_bias = Parameter(np.zeros(c))
        self.k_weight = Parameter(_normal(rng, c, c))
        self.k_bias = Parameter(np.zeros(c))
        self.v_weight = Parameter(_normal(rng, c, c))
        self.v_bias = Parameter(np.zeros(c))
        self.out_weight = Parameter(_normal(rng, c, c))
        self.out_bias = Parameter(np.zeros(c))
        self.ln2_gamma = Parameter(np.ones(c))
        self.ln2_beta = Parameter(np.zeros(c))
        self.fc1_weight = Parameter(_normal(rng, m, c))
        self.fc1_bias = Parameter(np.zeros(m))
        self.fc2_weight = Parameter(_normal(rng, c, m))
        self.fc2_bias = Parameter(np.zeros(c))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, c = x.shape
    return x.reshape(B, N, heads, c // heads).permute(0, 2, 1, 3)


def attention(x: Tensor, block: EncoderBlock) -> Tensor:
    """Global multi-head self-attention over tokens [B, T, c]."""
    B, N, c = x.shape
    h = block.heads
    q = _split_heads(T.linear(x, block.q_weight, block.q_bias), h)
    k = _split_heads(T.linear(x, block.k_weight, block.k_bias), h)
    v = _split_heads(T.linear(x, block.v_weight, block.v_bias), h)
    scores = T.matmul(q, k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(c // h))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = ctx.permute(0, 2, 1, 3).reshape(B, N, c)
    return T.linear(ctx, block.out_weight, block.out_bias)


def block_forward(x: Tensor, block: EncoderBlock) -> Tensor:
    """Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(.))."""
    c = block.ln1_gamma.shape[0]
    if x.ndim != 3 or x.shape[-1] != c:
        raise DimensionError(f"block_forward expects [B, T, {c}], got {x.shape}")
    x = x + attention(T.layernorm(x, block.ln1_gamma, block.ln1_beta, LN_EPS), block)
    hidden = T.gelu(T.linear(T.layernorm(x, block.ln2_gamma, block.ln2_beta, LN_EPS),
                             block.fc1_weight, block.fc1_bias))
    return x + T.linear(hidden, block.fc2_weight, block.fc2_bias)


def tokens_to_map(tokens: Tensor, cfg: BackboneConfig) -> Tensor:
    B = tokens.shape[0]
    g = cfg.grid
    return tokens.reshape(B, g, g, cfg.embed_dim).permute(0, 3, 1, 2)


SubstituteHook = Callable[[int, Tensor], Tensor]


class ViTEncoder(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self._cfg = cfg
        rng = np.random.default_rng(seed)
        self.patch = PatchEmbed(cfg, rng)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.depth)]

    @property
    def cfg(self) -> BackboneConfig:
        return self._cfg

    def embed(self, image: Tensor) -> Tensor:
        return patch_embed(image, self.patch, self._cfg)

    def load_weights(self, path) -> None:
        """Load named weights from an XMCK file (names relative to this encoder)."""
        from .formats import read_checkpoint

        self.load_state_dict({e.name: e.data for e in read_checkpoint(path)})


def encoder_forward(image: Tensor, encoder: ViTEncoder,
                    substitute: Optional[SubstituteHook] = None) -> tuple[list[Tensor], Tensor]:
    """Run the encoder, returning every block output F^l and the final map.

    ``substitute(l, F_l)`` may replace the input of block l+1 (and, for the
    last block, the tensor that becomes the final map).
    """
    cfg = encoder.cfg
    x = encoder.embed(image)
    features = []
    for l, block in enumerate(encoder.blocks):
        f = block_forward(x, block)
        features.append(f)
        x = f
        if substitute is not None:
            x = substitute(l, f)
            if x.shape != f.shape:
                raise DimensionError(f"substitution at layer {l} returned {x.shape}, expected {f.shape}")
    return features, tokens_to_map(x, cfg)
