"""Dual-stream segmentation network with the cross-modality adapter.

Modalities are grouped into a T1 stream (T1, T1ce) and a T2 stream
(T2, Flair).  Each stream is lifted to three channels and encoded by its own
frozen ViT.  After each of the first ``n`` blocks the two streams' outputs are
concatenated, projected back to ``c`` channels by one shared adapter, and the
result is added to both streams' next-layer inputs.  The two final maps are
summed and decoded without prompts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .module import Module, Parameter
from .tensor import Tensor
from .vit import BackboneConfig, ViTEncoder, block_forward, tokens_to_map

MODALITIES = ("t1", "t1ce", "t2", "flair")
T1_GROUP = ("t1", "t1ce")
T2_GROUP = ("t2", "flair")
DECODER_LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelVariant:
    kind: str  # "single" | "early" | "cross"
    modality: Optional[str] = None

    def __post_init__(self):
        if self.kind == "single":
            if self.modality not in MODALITIES:
                raise ConfigError(f"unknown modality {self.modality!r}")
        elif self.kind in ("early", "cross"):
            if self.modality is not None:
                raise ConfigError(f"variant {self.kind!r} takes no modality")
        else:
            raise ConfigError(f"unknown variant kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "ModelVariant":
        if text.startswith("single:"):
            return cls("single", text.split(":", 1)[1])
        return cls(text)

    def __str__(self) -> str:
        return f"single:{self.modality}" if self.kind == "single" else self.kind

    @property
    def input_groups(self) -> tuple[tuple[str, ...], ...]:
        """Modalities feeding each input tensor, in channel order."""
        if self.kind == "cross":
            return (T1_GROUP, T2_GROUP)
        if self.kind == "early":
            return (MODALITIES,)
        return ((self.modality,),)


ALL_VARIANTS = tuple(ModelVariant.parse(v) for v in
                     ("single:t1", "single:t1ce", "single:t2", "single:flair", "early", "cross"))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 4.0
    adapter_depth: Optional[int] = None  # None -> depth // 2
    variant: str = "cross"
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    decoder_widths: Optional[tuple[int, ...]] = None
    seed: int = 0

    def __post_init__(self):
        self.backbone  # validates
        ModelVariant.parse(self.variant)
        n = self.n_adapters
        if n < 0 or n > self.depth:
            raise ConfigError(f"adapter depth {n} outside [0, {self.depth}]")
        p = self.patch_size
        if p & (p - 1):
            raise ConfigError(f"patch size {p} is not a power of two; decoder cannot upsample by 2x stages")
        if self.decoder_widths is not None and len(self.decoder_widths) != self.n_stages:
            raise ConfigError(f"need {self.n_stages} decoder widths, got {len(self.decoder_widths)}")
        if self.lambda_dice < 0 or self.lambda_ce < 0 or self.lambda_dice + self.lambda_ce <= 0:
            raise ConfigError("loss weights must be nonnegative with a positive sum")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.image_size, self.patch_size, self.embed_dim,
                              self.depth, self.heads, self.mlp_ratio)

    @property
    def n_adapters(self) -> int:
        return self.depth // 2 if self.adapter_depth is None else self.adapter_depth

    @property
    def model_variant(self) -> ModelVariant:
        return ModelVariant.parse(self.variant)

    @property
    def n_stages(self) -> int:
        return self.patch_size.bit_length() - 1

    @property
    def widths(self) -> tuple[int, ...]:
        if self.decoder_widths is not None:
            return tuple(self.decoder_widths)
        return tuple(max(self.embed_dim >> (i + 1), 8) for i in range(self.n_stages))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _uniform(rng, fan_in, *shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ChannelLift(Module):
    """1x1 convolution from k input channels to the 3 the encoder expects."""

    def __init__(self, in_channels: int, rng: np.random.Generator, out_channels: int = 3):
        self.weight = Parameter(_uniform(rng, in_channels, out_channels, in_channels))
        self.bias = Parameter(np.zeros(out_channels))


def channel_lift(x: Tensor, lift: ChannelLift) -> Tensor:
    k = lift.weight.shape[1]
    if x.ndim != 4 or x.shape[1] != k:
        raise DimensionError(f"channel lift expects [B, {k}, S, S], got {x.shape}")
    return T.conv1x1(x, lift.weight, lift.bias)


class AdapterBlock(Module):
    """Projection f: 2c -> c.  Zero-initialised so training starts at the frozen baseline."""

    def __init__(self, embed_dim: int):
        self.weight = Parameter(np.zeros((embed_dim, 2 * embed_dim)))
        self.bias = Parameter(np.zeros(embed_dim))


def adapter_forward(f_t1: Tensor, f_t2: Tensor, block: AdapterBlock) -> Tensor:
    """C = f(F_T1 concat F_T2) on channels; F_T1 occupies the first c inputs."""
    if f_t1.shape != f_t2.shape:
        raise DimensionError(f"adapter inputs differ: {f_t1.shape} vs {f_t2.shape}")
    c = block.weight.shape[0]
    if f_t1.shape[-1] != c:
        raise DimensionError(f"adapter expects {c} channels, got {f_t1.shape[-1]}")
    return T.linear(T.concat([f_t1, f_t2], axis=-1), block.weight, block.bias)


class UpStage(Module):
    """Transposed-conv-style 2x upsample: project to 4*c_out, pixel-shuffle,
    channel LayerNorm, mix."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.proj_weight = Parameter(_uniform(rng, c_in, 4 * c_out, c_in))
        self.proj_bias = Parameter(np.zeros(4 * c_out))
        self.norm_gamma = Parameter(np.ones(c_out))
        self.norm_beta = Parameter(np.zeros(c_out))
        self.mix_weight = Parameter(_uniform(rng, c_out, c_out, c_out))
        self.mix_bias = Parameter(np.zeros(c_out))


def pixel_shuffle(x: Tensor) -> Tensor:
    """[B, 4C, H, W] -> [B, C, 2H, 2W]; channel 4k + 2i + j lands at offset (i, j)."""
    B, C4, H, W = x.shape
    C = C4 // 4
    x = x.reshape(B, C, 2, 2, H, W).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(B, C, 2 * H, 2 * W)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """LayerNorm over the channel axis of [B, C, H, W]."""
    y = T.layernorm(x.permute(0, 2, 3, 1), gamma, beta, DECODER_LN_EPS)
    return y.permute(0, 3, 1, 2)


def up_stage(x: Tensor, stage: UpStage) -> Tensor:
    x = pixel_shuffle(T.conv1x1(x, stage.proj_weight, stage.proj_bias))
    x = T.gelu(channel_norm(x, stage.norm_gamma, stage.norm_beta))
    return T.gelu(T.conv1x1(x, stage.mix_weight, stage.mix_bias))


class MaskDecoder(Module):
    def __init__(self, embed_dim: int, widths: Sequence[int], rng: np.random.Generator):
        dims = [embed_dim, *widths]
        self.stages = [UpStage(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.head_weight = Parameter(_uniform(rng, dims[-1], 2, dims[-1]))
        self.head_bias = Parameter(np.zeros(2))


class GliomaNet(Module):
    def __init__(self, config: ModelConfig):
        self._config = config
        variant = config.model_variant
        bb = config.backbone
        rng = np.random.default_rng([config.seed, 1])
        groups = variant.input_groups
        if variant.kind == "cross":
            self.lift_t1 = ChannelLift(len(groups[0]), rng)
            self.lift_t2 = ChannelLift(len(groups[1]), rng)
            # both streams start from the same "pretrained" weights
            self.encoder_t1 = ViTEncoder(bb, seed=config.seed)
            self.encoder_t2 = ViTEncoder(bb, seed=config.seed)
            self.adapters = [AdapterBlock(bb.embed_dim) for _ in range(config.n_adapters)]
        else:
            self.lift = ChannelLift(len(groups[0]), rng)
            self.encoder = ViTEncoder(bb, seed=config.seed)
        self.decoder = MaskDecoder(bb.embed_dim, config.widths, rng)
        self.name_parameters()
        freeze_encoders(self)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def variant(self) -> ModelVariant:
        return self._config.model_variant

    def encoders(self) -> list[ViTEncoder]:
        if self.variant.kind == "cross":
            return [self.encoder_t1, self.encoder_t2]
        return [self.encoder]

    def encoder_parameters(self) -> list[Parameter]:
        return [p for enc in self.encoders() for p in enc.parameters()]

    def forward(self, inputs, trace: Optional[list] = None) -> Tensor:
        return forward(inputs, self, trace)

    __call__ = forward


def freeze_encoders(net: GliomaNet) -> None:
    net.set_trainable(True)
    for p in net.encoder_parameters():
        p.trainable = False


def dual_encode(x_t1: Tensor, x_t2: Tensor, net: GliomaNet,
                trace: Optional[list] = None) -> tuple[Tensor, Tensor]:
    """Run both encoders in lockstep, fusing after each of the first n blocks.

    When ``trace`` is a list, one dict per adapter layer is appended holding
    the adapter output and both streams' block outputs and next inputs.
    """
    if net.variant.kind != "cross":
        raise ConfigError("dual_encode needs the cross-modality variant")
    enc1, enc2 = net.encoder_t1, net.encoder_t2
    n = len(net.adapters)
    if n > len(enc1.blocks):
        raise ConfigError(f"{n} adapters for {len(enc1.blocks)} blocks")
    x1, x2 = enc1.embed(x_t1), enc2.embed(x_t2)
    for l, (b1, b2) in enumerate(zip(enc1.blocks, enc2.blocks)):
        f1, f2 = block_forward(x1, b1), block_forward(x2, b2)
        if l < n:
            c = adapter_forward(f1, f2, net.adapters[l])
            x1, x2 = c + f1, c + f2
            if trace is not None:
                trace.append({"layer": l, "c": c, "f_t1": f1, "f_t2": f2, "x_t1": x1, "x_t2": x2})
        else:
            x1, x2 = f1, f2
    return tokens_to_map(x1, enc1.cfg), tokens_to_map(x2, enc2.cfg)


def fuse_high_level(feat_t1: Tensor, feat_t2: Tensor) -> Tensor:
    if feat_t1.shape != feat_t2.shape:
        raise DimensionError(f"cannot fuse {feat_t1.shape} with {feat_t2.shape}")
    return T.add(feat_t1, feat_t2)


def decode_mask(fused: Tensor, net: GliomaNet) -> Tensor:
    """Promptless decoder: [B, c, S/p, S/p] -> logits [B, 2, S, S]."""
    cfg = net.config
    g = cfg.backbone.grid
    if fused.ndim != 4 or fused.shape[1:] != (cfg.embed_dim, g, g):
        raise DimensionError(f"decoder expects [B, {cfg.embed_dim}, {g}, {g}], got {fused.shape}")
    x = fused
    for stage in net.decoder.stages:
        x = up_stage(x, stage)
    return T.conv1x1(x, net.decoder.head_weight, net.decoder.head_bias)


def _single_stream(x: Tensor, lift: ChannelLift, encoder: ViTEncoder) -> Tensor:
    from .vit import encoder_forward

    _, fmap = encoder_forward(channel_lift(x, lift), encoder)
    return fmap


def forward(inputs, net: GliomaNet, trace: Optional[list] = None) -> Tensor:
    """Logits [B, 2, S, S] for the inputs of the net's variant.

    ``inputs`` holds one array per modality group (see ModelVariant.input_groups).
    """
    groups = net.variant.input_groups
    if isinstance(inputs, (Tensor, np.ndarray)):
        inputs = (inputs,)
    if len(inputs) != len(groups):
        raise DataError(f"variant {net.variant} needs {len(groups)} input tensors, got {len(inputs)}")
    xs = []
    for arr, group in zip(inputs, groups):
        x = T.as_tensor(arr)
        if x.ndim != 4 or x.shape[1] != len(group):
            raise DataError(f"input for modalities {group} must be [B, {len(group)}, S, S], got {x.shape}")
        xs.append(x)
    if net.variant.kind == "cross":
        f1, f2 = dual_encode(channel_lift(xs[0], net.lift_t1), channel_lift(xs[1], net.lift_t2), net, trace)
        fused = fuse_high_level(f1, f2)
    else:
        fused = _single_stream(xs[0], net.lift, net.encoder)
    return decode_mask(fused, net)


def predict_mask(logits) -> np.ndarray:
    """Argmax over classes with ties going to background."""
    d = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return d[:, 1] > d[:, 0]
