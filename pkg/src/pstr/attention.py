"""Self-attention and the two sampling-based cross-attentions (deformable, part).

All layers work on batched queries ``(B, Nq, d)`` and feature maps
``(B, H, W, d)`` and are post-norm: ``norm(q + out_proj(attend(...)))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import LayerNorm, Linear, Module
from .numerics import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 32
    n_heads: int = 4
    n_points: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ReferencePoint:
    """Normalized sampling anchors, ``xy`` of shape (B, Nq, 2).

    ``wh`` (same shape) scales predicted offsets to the box size when given;
    without it offsets are read in feature-map pixels.
    """

    xy: np.ndarray
    wh: np.ndarray | None = None

    def __post_init__(self):
        self.xy = np.clip(np.asarray(self.xy, dtype=np.float64), 0.0, 1.0)
        if self.wh is not None:
            self.wh = np.clip(np.asarray(self.wh, dtype=np.float64), 0.0, 1.0)

    @classmethod
    def from_boxes(cls, boxes: np.ndarray) -> ReferencePoint:
        boxes = np.asarray(boxes)
        return cls(boxes[..., :2], boxes[..., 2:4])


class MultiHeadSelfAttention(Module):
    def __init__(self, rng, cfg: AttentionConfig):
        d = cfg.d_model
        self.cfg = cfg
        self.q_proj = Linear(rng, d, d)
        self.k_proj = Linear(rng, d, d)
        self.v_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor, pos: Tensor | None = None, return_weights: bool = False):
        if x.shape[-1] != self.cfg.d_model:
            raise ValueError(f"self-attention expects width {self.cfg.d_model}, got {x.shape[-1]}")
        B, n, d = x.shape
        h, dh = self.cfg.n_heads, self.cfg.d_head
        qk_in = x if pos is None else x + pos

        def heads(t):
            return t.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        q = heads(self.q_proj(qk_in))
        k = heads(self.k_proj(qk_in))
        v = heads(self.v_proj(x))
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        w = nx.softmax(scores, axis=-1)
        att = nx.matmul(w, v).transpose(0, 2, 1, 3).reshape(B, n, d)
        out = self.norm(x + self.out_proj(att))
        if return_weights:
            return out, w.data
        return out


def _sampling_locations(offsets: Tensor, ref: ReferencePoint, height: int, width: int, n_points: int) -> Tensor:
    """Offsets (B, Nq, nh, K, 2) around ``ref`` -> normalized locations."""
    xy = ref.xy[:, :, None, None, :]
    if ref.wh is not None:
        scale = ref.wh[:, :, None, None, :] * (0.5 / n_points)
        return nx.add(xy, offsets * scale)
    return nx.add(xy, offsets * np.array([1.0 / width, 1.0 / height]))


def _sample_heads(value: Tensor, locations, n_heads: int) -> Tensor:
    """Per-head bilinear sampling.

    value (B, H, W, d); locations (B, Nq, nh, K, 2) normalized.
    Returns (B, nh, Nq, K, d_head).
    """
    B, H, W, d = value.shape
    dh = d // n_heads
    locations = nx.as_tensor(locations)
    _, nq, _, k, _ = locations.shape
    pix = locations * np.array([W, H], dtype=np.float64) - 0.5
    pts = pix.transpose(0, 2, 1, 3, 4).reshape(B * n_heads, nq * k, 2)
    v = value.reshape(B, H, W, n_heads, dh).transpose(0, 3, 1, 2, 4).reshape(B * n_heads, H, W, dh)
    return nx.bilinear_sample(v, pts).reshape(B, n_heads, nq, k, dh)


def _merge_heads(x: Tensor) -> Tensor:
    """(B, nh, Nq, dh) -> (B, Nq, nh*dh)."""
    B, nh, nq, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, nq, nh * dh)


def _init_offset_bias(cfg: AttentionConfig) -> np.ndarray:
    # heads fan out in evenly spaced directions, point k at radius k+1
    theta = np.arange(cfg.n_heads) * (2.0 * math.pi / cfg.n_heads)
    grid = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    grid = grid / np.abs(grid).max(axis=-1, keepdims=True)
    grid = np.repeat(grid[:, None, :], cfg.n_points, axis=1)
    grid *= np.arange(1, cfg.n_points + 1)[None, :, None]
    return grid.reshape(-1)


class DeformableAttention(Module):
    """Sparse attention over K predicted sampling points per head.

    Used as the encoder self-attention (value map = the queries' own map),
    the decoder cross-attention, and the re-id ablation alternative to part
    attention.
    """

    def __init__(self, rng, cfg: AttentionConfig):
        d, h, k = cfg.d_model, cfg.n_heads, cfg.n_points
        self.cfg = cfg
        self.value_proj = Linear(rng, d, d)
        self.offset_proj = Linear(rng, d, h * k * 2, zero=True)
        self.offset_proj.bias.data[:] = _init_offset_bias(cfg)
        self.weight_proj = Linear(rng, d, h * k, zero=True)
        self.out_proj = Linear(rng, d, d)
        self.norm = LayerNorm(d)

    def project(self, value_map: Tensor) -> Tensor:
        return self.value_proj(value_map)

    def __call__(
        self,
        q: Tensor,
        ref: ReferencePoint,
        value_map: Tensor,
        pos: Tensor | None = None,
        *,
        value: Tensor | None = None,
        return_aux: bool = False,
    ):
        cfg = self.cfg
        B, nq, d = q.shape
        _, H, W, _ = value_map.shape
        q_in = q if pos is None else q + pos
        offsets = self.offset_proj(q_in).reshape(B, nq, cfg.n_heads, cfg.n_points, 2)
        loc = _sampling_locations(offsets, ref, H, W, cfg.n_points)
        if value is None:
            value = self.project(value_map)
        sampled = _sample_heads(value, loc, cfg.n_heads)  # (B, nh, Nq, K, dh)
        logits = self.weight_proj(q_in).reshape(B, nq, cfg.n_heads, cfg.n_points).transpose(0, 2, 1, 3)
        w = nx.softmax(logits, axis=-1)
        heads = (sampled * w.reshape(B, cfg.n_heads, nq, cfg.n_points, 1)).sum(axis=3)
        pre = self.out_proj(_merge_heads(heads))
        out = self.norm(q + pre)
        if return_aux:
            return out, {"weights": w.data, "locations": loc.data, "heads": heads.data, "sampled": sampled.data, "pre_residual": pre.data}
        return out


class PartAttentionLayer(Module):
    """Deformable-style sampling whose attention weights ignore the query.

    The query only predicts where the K part points sit.  The mean of the
    sampled part features then attends over the parts themselves
    (keys = key_proj(parts), values = parts), so the weights are a function
    of image content at the sampled locations alone.
    """

    def __init__(self, rng, cfg: AttentionConfig):
        d, h, k = cfg.d_model, cfg.n_heads, cfg.n_points
        self.cfg = cfg
        self.value_proj = Linear(rng, d, d)
        self.offset_proj = Linear(rng, d, h * k * 2, zero=True)
        self.offset_proj.bias.data[:] = _init_offset_bias(cfg)
        self.key_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)
        self.norm = LayerNorm(d)

    def project(self, value_map: Tensor) -> Tensor:
        return self.value_proj(value_map)

    def __call__(
        self,
        q: Tensor,
        ref: ReferencePoint,
        value_map: Tensor,
        pos: Tensor | None = None,
        *,
        value: Tensor | None = None,
        locations: np.ndarray | None = None,
        return_aux: bool = False,
    ):
        cfg = self.cfg
        B, nq, d = q.shape
        _, H, W, _ = value_map.shape
        h, k, dh = cfg.n_heads, cfg.n_points, cfg.d_head
        if locations is None:
            q_in = q if pos is None else q + pos
            offsets = self.offset_proj(q_in).reshape(B, nq, h, k, 2)
            loc = _sampling_locations(offsets, ref, H, W, k)
        else:
            loc = nx.Tensor(locations, dtype=q.dtype)
        if value is None:
            value = self.project(value_map)
        parts = _sample_heads(value, loc, h)  # (B, nh, Nq, K, dh)
        mean_part = parts.mean(axis=3)  # (B, nh, Nq, dh)
        tokens = parts.transpose(0, 2, 3, 1, 4).reshape(B, nq, k, d)
        keys = self.key_proj(tokens).reshape(B, nq, k, h, dh).transpose(0, 3, 1, 2, 4)
        logits = (keys * mean_part.reshape(B, h, nq, 1, dh)).sum(axis=-1) * (1.0 / math.sqrt(dh))
        w = nx.softmax(logits, axis=-1)  # (B, nh, Nq, K)
        heads = (parts * w.reshape(B, h, nq, k, 1)).sum(axis=3)
        pre = self.out_proj(_merge_heads(heads))
        out = self.norm(q + pre)
        if return_aux:
            return out, {"weights": w.data, "locations": loc.data, "heads": heads.data, "sampled": parts.data, "pre_residual": pre.data}
        return out


class PartAttentionBlock(Module):
    """Two part attention layers applied in sequence, independent parameters."""

    def __init__(self, rng, cfg: AttentionConfig, layer_cls=PartAttentionLayer):
        self.layers = [layer_cls(rng, cfg), layer_cls(rng, cfg)]

    def __call__(self, q: Tensor, ref: ReferencePoint, value_map: Tensor, pos: Tensor | None = None, *, values=None):
        for i, layer in enumerate(self.layers):
            v = None if values is None else values[i]
            q = layer(q, ref, value_map, pos, value=v)
        return q

    def project(self, value_map: Tensor) -> list[Tensor]:
        return [layer.project(value_map) for layer in self.layers]
