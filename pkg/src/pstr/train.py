"""AdamW optimization loop with per-step loss logging and resumable checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Dataset, SceneAnnotation
from .loss import IdentityBank, LossConfig, Target, total_loss, update_banks
from .model import PSTR, ModelConfig, load_parameters, model_entries, read_archive, write_archive

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "L_cls", "L_iou", "L_l1", "L_oim", "total"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 7500
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 0.1
    decay_points: tuple[float, float] = (19 / 24, 23 / 24)
    decay_factor: float = 0.1
    hflip: bool = True
    checkpoint_every: int = 1000
    precision: str = "float32"
    seed: int = 0


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        lr = self.cfg.lr
        for frac in self.cfg.decay_points:
            if step >= int(round(frac * self.cfg.steps)):
                lr *= self.cfg.decay_factor
        return lr

    def step(self) -> float:
        cfg = self.cfg
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        scale = 1.0
        if cfg.grad_clip and norm > cfg.grad_clip:
            scale = cfg.grad_clip / (norm + 1e-12)
        lr = self.lr_at(self.t)
        self.t += 1
        b1, b2 = cfg.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            p = self.params[k]
            g = g * scale
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay and p.data.ndim > 1:
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        return norm

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt/m/{k}"] = self.m[k]
            out[f"opt/v/{k}"] = self.v[k]
        return out

    def load_state(self, entries: dict[str, np.ndarray], t: int) -> None:
        for k, p in self.params.items():
            self.m[k] = entries[f"opt/m/{k}"].astype(p.dtype)
            self.v[k] = entries[f"opt/v/{k}"].astype(p.dtype)
        self.t = t


def scene_target(scene: SceneAnnotation) -> Target:
    boxes = np.array([p.box for p in scene.persons], dtype=np.float64).reshape(-1, 4)
    ids = np.array([p.identity_id for p in scene.persons], dtype=np.int64)
    return Target(boxes, ids)


def make_batch(scenes: list[SceneAnnotation], flips: np.ndarray, dtype) -> tuple[np.ndarray, list[Target]]:
    images, targets = [], []
    for scene, flip in zip(scenes, flips):
        img = scene.image[:, ::-1] if flip else scene.image
        t = scene_target(scene)
        if flip:
            t.boxes = t.boxes.copy()
            t.boxes[:, 0] = 1.0 - t.boxes[:, 0]
        images.append(img)
        targets.append(t)
    return np.stack(images).astype(dtype), targets


def batch_schedule(n_scenes: int, steps: int, batch: int, seed: int, hflip: bool):
    """Deterministic (scene indices, flip flags) for every step; epoch-wise shuffles."""
    rng = nx.make_rng(seed + 7919)
    order: list[int] = []
    flips: list[bool] = []
    need = steps * batch
    while len(order) < need:
        order.extend(rng.permutation(n_scenes).tolist())
        flips.extend((rng.uniform(size=n_scenes) < 0.5).tolist() if hflip else [False] * n_scenes)
    idx = np.array(order[:need]).reshape(steps, batch)
    fl = np.array(flips[:need]).reshape(steps, batch)
    return idx, fl


def create_banks(model_cfg: ModelConfig, loss_cfg: LossConfig, num_labeled: int, seed: int) -> dict[str, IdentityBank]:
    rng = nx.make_rng(seed + 104729)
    d = model_cfg.detector.d_model
    return {
        s: IdentityBank.create(num_labeled, loss_cfg.queue_size, d, rng, loss_cfg.tau, loss_cfg.momentum)
        for s in model_cfg.reid.scales
    }


class Trainer:
    """Owns model, optimizer and identity banks for one run."""

    def __init__(self, model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig, dataset: Dataset):
        self.model_cfg = model_cfg
        self.loss_cfg = loss_cfg
        self.cfg = train_cfg
        self.dataset = dataset
        self.dtype = np.float32 if train_cfg.precision == "float32" else np.float64
        with nx.default_dtype(self.dtype):
            self.model = PSTR(model_cfg, seed=train_cfg.seed)
        self.params = dict(self.model.named_parameters())
        self.opt = AdamW(self.params, train_cfg)
        self.banks = create_banks(model_cfg, loss_cfg, dataset.num_labeled, train_cfg.seed)
        self.schedule = batch_schedule(len(dataset.train), train_cfg.steps, train_cfg.batch_size, train_cfg.seed, train_cfg.hflip)
        self.step_idx = 0
        self.last_features: dict[str, np.ndarray] = {}  # level-3 re-id rows of the latest step, per scale

    def train_step(self) -> dict[str, float]:
        idx, flips = self.schedule[0][self.step_idx], self.schedule[1][self.step_idx]
        images, targets = make_batch([self.dataset.train[i] for i in idx], flips, self.dtype)
        with nx.default_dtype(self.dtype):
            out = self.model(images, train=True)
            lo = total_loss(out.decoder, out.reid, targets, self.banks, self.loss_cfg)
        row = {"step": self.step_idx, **lo.breakdown.as_row()}
        if not all(math.isfinite(v) for v in row.values()):
            raise TrainingError(
                f"non-finite loss at step {self.step_idx} (scenes {idx.tolist()}, flips {flips.tolist()}, "
                f"seed {self.cfg.seed}): {row}"
            )
        self.model.zero_grad()
        lo.total.backward()
        row["grad_norm"] = self.opt.step()
        update_banks(out.reid, targets, lo.matches, self.banks)
        self.last_features = {s: out.reid.per_level[(3, s)].data for s in self.banks}
        self.step_idx += 1
        return row

    # -- persistence -----------------------------------------------------
    def save(self, path) -> None:
        entries = model_entries(self.model)
        for s, bank in self.banks.items():
            entries[f"bank/{s}/V"] = bank.V
            entries[f"bank/{s}/U"] = bank.U
        entries.update(self.opt.state_entries())
        meta = {
            "model": self.model_cfg.to_dict(),
            "loss": _jsonable(asdict(self.loss_cfg)),
            "train": _jsonable(asdict(self.cfg)),
            "step": self.step_idx,
            "bank_heads": {s: b.head for s, b in self.banks.items()},
            "num_labeled": self.dataset.num_labeled,
        }
        write_archive(path, entries, meta)

    def load(self, path) -> None:
        entries, meta = read_archive(path)
        load_parameters(self.model, entries)
        for s, bank in self.banks.items():
            bank.V = entries[f"bank/{s}/V"].copy()
            bank.U = entries[f"bank/{s}/U"].copy()
            bank.head = int(meta["bank_heads"][s])
        self.step_idx = int(meta["step"])
        self.opt.load_state(entries, self.step_idx)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, tuple):
        return list(d)
    return d


def run_training(trainer: Trainer, out_dir, *, on_step=None, max_seconds: float | None = None) -> Path:
    """Run to ``cfg.steps``; appends to ``losses.csv`` and writes checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "losses.csv"
    fresh = trainer.step_idx == 0 or not csv_path.exists()
    start = time.time()
    with open(csv_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        if fresh:
            writer.writeheader()
        while trainer.step_idx < trainer.cfg.steps:
            row = trainer.train_step()
            writer.writerow(row)
            if on_step is not None:
                on_step(trainer, row)
            if trainer.step_idx % 200 == 0:
                log.info("step %d %s", trainer.step_idx, json.dumps({k: round(v, 4) for k, v in row.items()}))
            every = trainer.cfg.checkpoint_every
            if every and trainer.step_idx % every == 0 and trainer.step_idx < trainer.cfg.steps:
                trainer.save(out / f"checkpoint_{trainer.step_idx:06d}.ckpt")
            if max_seconds is not None and time.time() - start > max_seconds:
                log.warning("time budget reached at step %d", trainer.step_idx)
                break
    final = out / "final.ckpt"
    trainer.save(final)
    return final
