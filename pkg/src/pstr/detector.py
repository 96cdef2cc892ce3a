"""Toy backbone plus the 3-encoder / 3-decoder deformable detection stack."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, DeformableAttention, MultiHeadSelfAttention, ReferencePoint
from .layers import MLP, Conv2d, FeedForward, Linear, Module, param, sine_embedding
from .numerics import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    d_model: int = 32
    n_heads: int = 4
    n_points: int = 4
    n_encoders: int = 3
    n_decoders: int = 3
    num_queries: int = 20
    strides: tuple[int, int, int] = (4, 8, 16)
    ffn_mult: int = 2

    def __post_init__(self):
        s2, s3, s4 = self.strides
        if not (s2 < s3 < s4) or s3 % s2 or s4 % s3:
            raise ConfigError(f"strides must increase by integer factors, got {self.strides}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be positive")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.n_points)


@dataclass
class BackboneFeatures:
    P2: Tensor
    P3: Tensor
    P4: Tensor

    def __getitem__(self, name: str) -> Tensor:
        return getattr(self, name)


@dataclass
class DecoderFeatures:
    """Per-level query features with the boxes and scores decoded from them.

    ``features[j]``, ``logits[j]`` and ``boxes[j]`` belong to decoder level
    j+1.  ``references[j]`` is the (detached) box level j+1 sampled around.
    """

    features: list[Tensor] = field(default_factory=list)
    logits: list[Tensor] = field(default_factory=list)
    boxes: list[Tensor] = field(default_factory=list)
    references: list[np.ndarray] = field(default_factory=list)


@dataclass
class BoxPrediction:
    score: float
    box: np.ndarray  # (cx, cy, w, h) normalized


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(x, eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


class DeformableConv(Module):
    """3x3 convolution whose taps are shifted by per-location predicted offsets.

    Offsets start at zero, so at initialization this is an ordinary 3x3 conv.
    """

    def __init__(self, rng, c_in: int, c_out: int):
        self.offset_conv = Conv2d(rng, c_in, 18, 3, padding=1, zero=True)
        self.proj = Linear(rng, 9 * c_in, c_out)
        self.c_in = c_in

    def __call__(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        off = self.offset_conv(x).reshape(B, H, W, 9, 2)
        ky, kx = np.meshgrid(np.arange(-1, 2), np.arange(-1, 2), indexing="ij")
        taps = np.stack([kx.ravel(), ky.ravel()], axis=-1).astype(np.float64)  # (9, 2) as (x, y)
        gy, gx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        base = np.stack([gx, gy], axis=-1)[:, :, None, :] + taps[None, None]  # (H, W, 9, 2)
        pts = (off + base[None]).reshape(B, H * W * 9, 2)
        cols = nx.bilinear_sample(x, pts).reshape(B, H, W, 9 * C)
        return self.proj(cols)


class Backbone(Module):
    """Three strided conv stages, then a deformable conv per pyramid level."""

    def __init__(self, rng, cfg: DetectorConfig, width: int | None = None):
        c = width or cfg.d_model
        s2, s3, s4 = cfg.strides
        self.strides = cfg.strides
        self.stem = Conv2d(rng, 3, c, s2, stride=s2)
        # centre [0, 1] pixels: the stem has no padding, so this bias equals
        # convolving (image - 0.5) exactly
        self.stem.bias.data = self.stem.bias.data - 0.5 * self.stem.weight.data.sum(axis=(0, 1, 2))
        self.stem_mix = Conv2d(rng, c, c, 3, padding=1)
        self.stage3 = Conv2d(rng, c, c, s3 // s2 + 1, stride=s3 // s2, padding=(s3 // s2) // 2)
        self.stage4 = Conv2d(rng, c, c, s4 // s3 + 1, stride=s4 // s3, padding=(s4 // s3) // 2)
        self.dcn = {name: DeformableConv(rng, c, cfg.d_model) for name in ("P2", "P3", "P4")}

    def __call__(self, images) -> BackboneFeatures:
        images = nx.as_tensor(images)
        B, H, W, _ = images.shape
        big = self.strides[-1]
        if H % big or W % big:
            raise ConfigError(f"image size {H}x{W} not divisible by stride {big}")
        c2 = nx.relu(self.stem_mix(nx.relu(self.stem(images))))
        c3 = nx.relu(self.stage3(c2))
        c4 = nx.relu(self.stage4(c3))
        for c, s in zip((c2, c3, c4), self.strides):
            assert c.shape[1] == H // s and c.shape[2] == W // s, (c.shape, s)
        return BackboneFeatures(self.dcn["P2"](c2), self.dcn["P3"](c3), self.dcn["P4"](c4))


def grid_centers(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) centers of an H x W grid, row-major, shape (H*W, 2)."""
    gy, gx = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


class EncoderLayer(Module):
    def __init__(self, rng, cfg: DetectorConfig):
        self.attn = DeformableAttention(rng, cfg.attention)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_mult * cfg.d_model)

    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        B, H, W, d = x.shape
        tokens = x.reshape(B, H * W, d)
        ref = ReferencePoint(np.broadcast_to(grid_centers(H, W), (B, H * W, 2)))
        out = self.attn(tokens, ref, x, pos)
        return self.ffn(out).reshape(B, H, W, d)


class Encoder(Module):
    def __init__(self, rng, cfg: DetectorConfig):
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.n_encoders)]
        self.d_model = cfg.d_model

    def __call__(self, p4: Tensor) -> list[Tensor]:
        B, H, W, d = p4.shape
        pos = nx.Tensor(sine_embedding(grid_centers(H, W), d)[None], dtype=p4.dtype)
        outs = []
        x = p4
        for layer in self.layers:
            x = layer(x, pos)
            outs.append(x)
        return outs


class DecoderLayer(Module):
    def __init__(self, rng, cfg: DetectorConfig):
        self.self_attn = MultiHeadSelfAttention(rng, cfg.attention)
        self.cross_attn = DeformableAttention(rng, cfg.attention)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_mult * cfg.d_model)

    def __call__(self, x: Tensor, pos: Tensor, ref: ReferencePoint, memory: Tensor) -> Tensor:
        x = self.self_attn(x, pos)
        x = self.cross_attn(x, ref, memory, pos)
        return self.ffn(x)


class PredictionHead(Module):
    """Classification MLP (one logit) and box MLP refining the reference box."""

    def __init__(self, rng, d_model: int, prior_prob: float = 0.01):
        self.cls = MLP(rng, [d_model, d_model, 1])
        self.cls.layers[-1].bias.data[:] = -np.log((1 - prior_prob) / prior_prob)
        self.box = MLP(rng, [d_model, d_model, d_model, 4], zero_last=True)

    def __call__(self, feats: Tensor, ref_logit) -> tuple[Tensor, Tensor]:
        logits = self.cls(feats).reshape(*feats.shape[:-1])
        boxes = nx.sigmoid(nx.add(self.box(feats), ref_logit))
        return logits, boxes


def predictions_from(logits: np.ndarray, boxes: np.ndarray) -> list[BoxPrediction]:
    scores = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return [BoxPrediction(float(s), np.asarray(b, dtype=np.float64)) for s, b in zip(scores, boxes)]


class Decoder(Module):
    """Cascaded decoders with iterative box refinement.

    Level 1 samples around learned initial boxes; level j>1 around the
    (detached) boxes predicted at level j-1.  ``references`` pins those
    detached boxes to given values, which finite-difference checks need
    since the detach is invisible to a perturbation.
    """

    def __init__(self, rng, cfg: DetectorConfig):
        n, d = cfg.num_queries, cfg.d_model
        self.query_content = param(rng.normal(0.0, 1.0, size=(n, d)))
        self.query_pos = param(rng.normal(0.0, 1.0, size=(n, d)))
        init = np.concatenate([rng.uniform(0.1, 0.9, size=(n, 2)), np.full((n, 2), 0.2)], axis=-1)
        self.init_ref = param(inverse_sigmoid(init))
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.n_decoders)]
        self.heads = [PredictionHead(rng, d) for _ in range(cfg.n_decoders)]

    def __call__(self, memory: Tensor, levels: int | None = None, references: list[np.ndarray] | None = None) -> DecoderFeatures:
        B = memory.shape[0]
        n, d = self.query_content.shape
        x = nx.add(nx.Tensor(np.zeros((B, n, d)), dtype=memory.dtype), self.query_content)
        pos = self.query_pos
        out = DecoderFeatures()
        ref_logit: Tensor | np.ndarray = self.init_ref
        ref_box = np.broadcast_to(1.0 / (1.0 + np.exp(-self.init_ref.data)), (B, n, 4))
        for j, (layer, head) in enumerate(zip(self.layers[:levels], self.heads[:levels])):
            if references is not None:
                ref_box = references[j]
                if j:
                    ref_logit = inverse_sigmoid(ref_box)
            x = layer(x, pos, ReferencePoint.from_boxes(ref_box), memory)
            logits, boxes = head(x, ref_logit)
            out.features.append(x)
            out.logits.append(logits)
            out.boxes.append(boxes)
            out.references.append(ref_box)
            ref_box = boxes.data
            ref_logit = inverse_sigmoid(ref_box)
        return out


class Detector(Module):
    """Encoder stack on P4 followed by the decoder stack."""

    def __init__(self, rng, cfg: DetectorConfig):
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)

    def __call__(self, p4: Tensor) -> tuple[list[Tensor], DecoderFeatures]:
        enc = self.encoder(p4)
        return enc, self.decoder(enc[-1])
