"""Discriminative re-id decoder: single / parallel / shared variants, multi-scale."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    AttentionConfig,
    DeformableAttention,
    MultiHeadSelfAttention,
    PartAttentionBlock,
    PartAttentionLayer,
    ReferencePoint,
)
from .detector import BackboneFeatures, ConfigError, DecoderFeatures
from .layers import FeedForward, Module
from .numerics import Tensor

VARIANTS = ("single", "parallel", "shared")
SCALES = ("P2", "P3", "P4")
INPUT_SOURCES = ("backbone", "encoder_1", "encoder_2", "encoder_3")
ATTENTIONS = ("part", "deformable")


@dataclass(frozen=True)
class ReidConfig:
    variant: str = "shared"
    scales: tuple[str, ...] = SCALES
    input_source: str = "backbone"
    attention: str = "part"
    depth: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown re-id variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.scales or any(s not in SCALES for s in self.scales) or len(set(self.scales)) != len(self.scales):
            raise ConfigError(f"scales must be a non-empty subset of {SCALES}, got {self.scales}")
        if self.input_source not in INPUT_SOURCES:
            raise ConfigError(f"unknown input_source {self.input_source!r}")
        if self.input_source != "backbone" and tuple(self.scales) != ("P4",):
            raise ConfigError("encoder input sources only exist at scale P4")
        if self.attention not in ATTENTIONS:
            raise ConfigError(f"unknown re-id attention {self.attention!r}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def levels(self) -> tuple[int, ...]:
        """Decoder levels (1-based) that receive re-id supervision in training."""
        return (3,) if self.variant == "single" else (1, 2, 3)


@dataclass
class ReidFeatures:
    """Unit-norm re-id embeddings keyed by (level, scale), each (B, N, d)."""

    per_level: dict[tuple[int, str], Tensor] = field(default_factory=dict)
    concat: Tensor | None = None


class ReidDecoderLayer(Module):
    """Self-attention over the N re-id queries, part attention block, MLP."""

    def __init__(self, rng, cfg: AttentionConfig, attention: str = "part", ffn_mult: int = 2):
        self.self_attn = MultiHeadSelfAttention(rng, cfg)
        layer_cls = PartAttentionLayer if attention == "part" else DeformableAttention
        self.block = PartAttentionBlock(rng, cfg, layer_cls)
        self.ffn = FeedForward(rng, cfg.d_model, ffn_mult * cfg.d_model)

    def __call__(self, queries: Tensor, boxes: np.ndarray, fmap: Tensor, values=None) -> Tensor:
        x = self.self_attn(queries)
        x = self.block(x, ReferencePoint.from_boxes(boxes), fmap, values=values)
        return self.ffn(x)

    def project(self, fmap: Tensor) -> list[Tensor]:
        return self.block.project(fmap)


class ReidDecoder(Module):
    """``depth`` stacked re-id decoder layers: one parameter set."""

    def __init__(self, rng, cfg: AttentionConfig, reid_cfg: ReidConfig):
        self.layers = [ReidDecoderLayer(rng, cfg, reid_cfg.attention) for _ in range(reid_cfg.depth)]

    def project(self, fmap: Tensor) -> list[list[Tensor]]:
        return [layer.project(fmap) for layer in self.layers]

    def __call__(self, queries: Tensor, boxes: np.ndarray, fmap: Tensor, values=None) -> Tensor:
        x = queries
        for i, layer in enumerate(self.layers):
            x = layer(x, boxes, fmap, None if values is None else values[i])
        return x


class ReidHead(Module):
    """One re-id decoder set per configured scale.

    shared: one decoder reused for every level (Siamese); parallel: one
    decoder per level; single: one decoder, level 3 only.
    """

    def __init__(self, rng, att_cfg: AttentionConfig, cfg: ReidConfig):
        self.cfg = cfg
        n = 3 if cfg.variant == "parallel" else 1
        self.decoders = {s: [ReidDecoder(rng, att_cfg, cfg) for _ in range(n)] for s in cfg.scales}

    def decoder_for(self, scale: str, level: int) -> ReidDecoder:
        if scale not in self.decoders:
            raise ConfigError(f"scale {scale} is not configured (have {tuple(self.decoders)})")
        decs = self.decoders[scale]
        return decs[level - 1] if self.cfg.variant == "parallel" else decs[0]

    def input_map(self, feats: BackboneFeatures, encoder_out: list[Tensor] | None, scale: str) -> Tensor:
        if self.cfg.input_source == "backbone":
            return feats[scale]
        idx = int(self.cfg.input_source.split("_")[1]) - 1
        return encoder_out[idx]

    def decode(self, fmap: Tensor, queries: Tensor, boxes: np.ndarray, scale: str, level: int, values=None) -> Tensor:
        """F_r(level, scale): raw (un-normalized) decoder output, (B, N, d)."""
        return self.decoder_for(scale, level)(queries, boxes, fmap, values)

    def forward_train(self, feats: BackboneFeatures, dec: DecoderFeatures, encoder_out=None) -> ReidFeatures:
        out = ReidFeatures()
        for scale in self.cfg.scales:
            fmap = self.input_map(feats, encoder_out, scale)
            cache: dict[int, list] = {}
            for level in self.cfg.levels:
                decoder = self.decoder_for(scale, level)
                # shared variant projects the map once for all levels
                if id(decoder) not in cache:
                    cache[id(decoder)] = decoder.project(fmap)
                raw = decoder(dec.features[level - 1], dec.boxes[level - 1].data, fmap, cache[id(decoder)])
                out.per_level[(level, scale)] = nx.l2_normalize(raw)
        out.concat = concat_scales([out.per_level[(3, s)] for s in self.cfg.scales])
        return out

    def forward_infer(self, feats: BackboneFeatures, dec: DecoderFeatures, encoder_out=None) -> ReidFeatures:
        out = ReidFeatures()
        for scale in self.cfg.scales:
            fmap = self.input_map(feats, encoder_out, scale)
            raw = self.decode(fmap, dec.features[2], dec.boxes[2].data, scale, 3)
            out.per_level[(3, scale)] = nx.l2_normalize(raw)
        out.concat = concat_scales([out.per_level[(3, s)] for s in self.cfg.scales])
        return out


def concat_scales(per_scale: list[Tensor]) -> Tensor:
    """Concatenate unit-norm per-scale features, then renormalize."""
    if len(per_scale) == 1:
        return per_scale[0]
    return nx.l2_normalize(nx.concat(per_scale, axis=-1))
