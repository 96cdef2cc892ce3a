"""The assembled network and its checkpoint archive.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"PSTRCKPT"
    u32       format version (CHECKPOINT_VERSION)
    u64       metadata length M, then M bytes of UTF-8 JSON
              (code version, model config, bank heads, optimizer step, ...)
    u32       entry count
    per entry:
      u16     name length, then the UTF-8 name
      u8      ndim, then ndim x u32 dims
      prod(dims) x float64 values, row-major

Entry names are ``param/<dotted.path>``, ``bank/<scale>/V``,
``bank/<scale>/U`` and ``opt/{m,v}/<dotted.path>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .detector import Backbone, BackboneFeatures, DecoderFeatures, Detector, DetectorConfig
from .numerics import Tensor
from .reid import ReidConfig, ReidFeatures, ReidHead

CKPT_MAGIC = b"PSTRCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    reid: ReidConfig = field(default_factory=ReidConfig)

    def to_dict(self) -> dict:
        return {"detector": asdict(self.detector), "reid": asdict(self.reid)}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        det = dict(d["detector"])
        det["strides"] = tuple(det["strides"])
        reid = dict(d["reid"])
        reid["scales"] = tuple(reid["scales"])
        return cls(DetectorConfig(**det), ReidConfig(**reid))


@dataclass
class ModelOutput:
    features: BackboneFeatures
    encoder: list[Tensor]
    decoder: DecoderFeatures
    reid: ReidFeatures


class PSTR:
    """Backbone -> detection encoder/decoder -> discriminative re-id decoder."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        rng = nx.make_rng(seed)
        self.backbone = Backbone(rng, cfg.detector)
        self.detector = Detector(rng, cfg.detector)
        self.reid = ReidHead(rng, cfg.detector.attention, cfg.reid)

    def named_parameters(self):
        for prefix, mod in (("backbone.", self.backbone), ("detector.", self.detector), ("reid.", self.reid)):
            yield from mod.named_parameters(prefix)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, images, train: bool = True) -> ModelOutput:
        feats = self.backbone(images)
        enc, dec = self.detector(feats.P4)
        enc_out = enc if self.cfg.reid.input_source != "backbone" else None
        if train:
            reid = self.reid.forward_train(feats, dec, enc_out)
        else:
            reid = self.reid.forward_infer(feats, dec, enc_out)
        return ModelOutput(feats, enc, dec, reid)

    def predict(self, images) -> list[dict[str, np.ndarray]]:
        """Raw set predictions from the last decoder level, one dict per image."""
        with nx.no_grad():
            out = self(images, train=False)
        logits = out.decoder.logits[-1].data
        scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
        boxes = out.decoder.boxes[-1].data.astype(np.float64)
        feats = out.reid.concat.data.astype(np.float64)
        return [{"scores": scores[b], "boxes": boxes[b], "features": feats[b]} for b in range(len(scores))]


# -- checkpoint IO -------------------------------------------------------
def write_archive(path, entries: dict[str, np.ndarray], meta: dict) -> None:
    meta = dict(meta)
    meta.setdefault("code_version", __version__)
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(blob)), blob]
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a PSTR checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (mlen,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(mlen).decode())
    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        entries[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
    return entries, meta


def model_entries(model: PSTR) -> dict[str, np.ndarray]:
    return {f"param/{k}": p.data for k, p in model.named_parameters()}


def load_parameters(model: PSTR, entries: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    missing = [k for k in own if f"param/{k}" not in entries]
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[0]}")
    for k, p in own.items():
        arr = entries[f"param/{k}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.dtype)
    extra = [k for k in entries if k.startswith("param/") and k[6:] not in own]
    if extra:
        raise CheckpointError(f"checkpoint has {len(extra)} parameters this model lacks, e.g. {extra[0]}")
