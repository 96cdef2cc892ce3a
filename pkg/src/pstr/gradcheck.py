"""Finite-difference audit of every differentiable operation.

Each check draws random small instances, contracts the output with a fixed
random tensor to get a scalar, and compares ``backward()`` against central
differences, in 64-bit.  Inputs are checked in full; module parameters at
a random sample of coordinates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

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
from .detector import Decoder, DeformableConv, DetectorConfig, Encoder
from .layers import Module
from .loss import IdentityBank, giou_tensor, oim_loss_tensor, sigmoid_focal_loss
from .reid import ReidConfig, ReidDecoder

TOL = 1e-4
STEP = 1e-5
# below this magnitude entries are compared absolutely; central differences
# carry ~1e-10 of rounding noise, so exact zeros would otherwise "fail"
FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOL


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    return nx.relative_error(a, n, FLOOR)


def check_instance(
    build: Callable[..., nx.Tensor],
    inputs: dict[str, np.ndarray],
    rng: np.random.Generator,
    modules: tuple[Module, ...] = (),
    param_coords: int = 6,
) -> float:
    """Max relative error between analytic and numeric gradients for one draw."""
    with nx.default_dtype(np.float64):
        tensors = {k: nx.Tensor(v, requires_grad=True) for k, v in inputs.items()}
        params = [p for m in modules for p in m.parameters()]
        for p in params:
            p.grad = None
        out = build(**tensors)
        proj = rng.normal(size=out.shape)
        (out * proj).sum().backward()

        def scalar() -> float:
            with nx.no_grad():
                return float((build(**{k: nx.Tensor(v) for k, v in inputs.items()}).data * proj).sum())

        worst = 0.0
        for k, arr in inputs.items():
            def f(x, k=k):
                saved = inputs[k]
                inputs[k] = x
                try:
                    return scalar()
                finally:
                    inputs[k] = saved

            num = nx.finite_diff_gradient(f, arr, STEP)
            ana = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arr)
            worst = max(worst, _rel_err(ana, num))
        if params and param_coords:
            for _ in range(param_coords):
                p = params[int(rng.integers(len(params)))]
                i = int(rng.integers(p.data.size))
                flat = p.data.reshape(-1)
                orig = flat[i]
                flat[i] = orig + STEP
                fp = scalar()
                flat[i] = orig - STEP
                fm = scalar()
                flat[i] = orig
                num = (fp - fm) / (2 * STEP)
                ana = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
                worst = max(worst, _rel_err(np.array([ana]), np.array([num])))
        return worst


def _perturb(module: Module, rng, scale: float = 0.3) -> Module:
    """Move zero-initialized projections off zero so every path carries gradient."""
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale / np.sqrt(max(1, p.shape[0])), size=p.shape)
    return module


def _ref(rng, b, n, boxes=True):
    xy = rng.uniform(0.25, 0.75, size=(b, n, 2))
    return ReferencePoint(xy, rng.uniform(0.3, 0.6, size=(b, n, 2)) if boxes else None)


# -- individual checks ---------------------------------------------------
def _softmax(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 7)))
    return check_instance(lambda x: nx.softmax(x, axis=-1), {"x": rng.normal(size=shape) * 2}, rng)


def _bilinear(rng):
    b, h, w, c, p = 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
    pts = np.stack([rng.uniform(-1.0, w, size=(b, p)), rng.uniform(-1.0, h, size=(b, p))], axis=-1)
    # keep clear of knots where the interpolant has kinks
    frac = pts - np.floor(pts)
    pts = np.where(np.abs(frac) < 1e-3, pts + 0.01, pts)
    return check_instance(nx.bilinear_sample, {"value": rng.normal(size=(b, h, w, c)), "points": pts}, rng)


def _linear(rng):
    n, di, do = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return check_instance(
        nx.linear, {"x": rng.normal(size=(n, di)), "weight": rng.normal(size=(di, do)), "bias": rng.normal(size=do)}, rng
    )


def _layer_norm(rng):
    d = int(rng.integers(2, 7))
    return check_instance(
        lambda x, gain, bias: nx.layer_norm(x, gain, bias, 1e-5),
        {"x": rng.normal(size=(2, d)), "gain": rng.normal(size=d), "bias": rng.normal(size=d)},
        rng,
    )


def _conv(rng):
    k, s = (3, 1) if rng.uniform() < 0.5 else (3, 2)
    return check_instance(
        lambda x, weight, bias: nx.conv2d(x, weight, bias, stride=s, padding=1),
        {"x": rng.normal(size=(1, 5, 5, 2)), "weight": rng.normal(size=(k, k, 2, 3)), "bias": rng.normal(size=3)},
        rng,
    )


def _deform_conv(rng):
    m = _perturb(DeformableConv(rng, 2, 3), rng, 0.2)
    return check_instance(lambda x: m(x), {"x": rng.normal(size=(1, 4, 4, 2))}, rng, (m,))


def _cfg(rng) -> AttentionConfig:
    return AttentionConfig(8, int(rng.choice([1, 2])), int(rng.integers(1, 4)))


def _self_attention(rng):
    m = MultiHeadSelfAttention(rng, _cfg(rng))
    n = int(rng.integers(1, 5))
    return check_instance(lambda x, pos: m(x, pos), {"x": rng.normal(size=(1, n, 8)), "pos": rng.normal(size=(1, n, 8))}, rng, (m,))


def _deformable(rng):
    m = _perturb(DeformableAttention(rng, _cfg(rng)), rng)
    n = int(rng.integers(1, 4))
    ref = _ref(rng, 1, n, boxes=rng.uniform() < 0.5)
    return check_instance(lambda q, fmap: m(q, ref, fmap), {"q": rng.normal(size=(1, n, 8)), "fmap": rng.normal(size=(1, 4, 4, 8))}, rng, (m,))


def _part_layer(rng):
    m = _perturb(PartAttentionLayer(rng, _cfg(rng)), rng)
    n = int(rng.integers(1, 4))
    ref = _ref(rng, 1, n)
    return check_instance(lambda q, fmap: m(q, ref, fmap), {"q": rng.normal(size=(1, n, 8)), "fmap": rng.normal(size=(1, 4, 4, 8))}, rng, (m,))


def _part_block(rng):
    m = _perturb(PartAttentionBlock(rng, _cfg(rng)), rng)
    n = int(rng.integers(1, 4))
    ref = _ref(rng, 1, n)
    return check_instance(lambda q, fmap: m(q, ref, fmap), {"q": rng.normal(size=(1, n, 8)), "fmap": rng.normal(size=(1, 4, 4, 8))}, rng, (m,))


def _small_det_cfg(rng) -> DetectorConfig:
    return DetectorConfig(d_model=8, n_heads=2, n_points=2, num_queries=int(rng.integers(1, 4)))


def _encoder(rng):
    m = _perturb(Encoder(rng, _small_det_cfg(rng)), rng)
    return check_instance(lambda p4: m(p4)[-1], {"p4": rng.normal(size=(1, 4, 4, 8))}, rng, (m,))


def _decoder(rng):
    m = _perturb(Decoder(rng, _small_det_cfg(rng)), rng, 0.1)
    memory = rng.normal(size=(1, 2, 2, 8))
    with nx.no_grad(), nx.default_dtype(np.float64):
        refs = m(nx.Tensor(memory)).references

    def build(memory):
        out = m(memory, references=refs)
        return nx.concat([out.features[-1], out.logits[-1].reshape(*out.logits[-1].shape, 1), out.boxes[-1]], axis=-1)

    return check_instance(build, {"memory": memory}, rng, (m,))


def _reid_decoder(rng):
    cfg = _cfg(rng)
    m = _perturb(ReidDecoder(rng, cfg, ReidConfig()), rng)
    boxes = np.concatenate([rng.uniform(0.3, 0.7, size=(1, 2, 2)), rng.uniform(0.2, 0.5, size=(1, 2, 2))], axis=-1)
    return check_instance(lambda q, fmap: m(q, boxes, fmap), {"q": rng.normal(size=(1, 2, 8)), "fmap": rng.normal(size=(1, 4, 4, 8))}, rng, (m,))


def _focal(rng):
    n = int(rng.integers(1, 8))
    y = (rng.uniform(size=n) < 0.3).astype(float)
    return check_instance(lambda x: sigmoid_focal_loss(x, y), {"x": rng.normal(size=n) * 2}, rng)


def _giou(rng):
    m = int(rng.integers(1, 5))
    tgt = np.concatenate([rng.uniform(0.3, 0.7, size=(m, 2)), rng.uniform(0.1, 0.4, size=(m, 2))], axis=-1)
    pred = tgt + rng.normal(0, 0.08, size=(m, 4))
    pred[:, 2:] = np.abs(pred[:, 2:]) + 0.05
    return check_instance(lambda pred: giou_tensor(pred, tgt), {"pred": pred}, rng)


def _l1(rng):
    m = int(rng.integers(1, 5))
    tgt = rng.uniform(size=(m, 4))
    pred = tgt + rng.choice([-1, 1], size=(m, 4)) * rng.uniform(0.01, 0.2, size=(m, 4))
    return check_instance(lambda pred: nx.absolute(pred - tgt).sum(), {"pred": pred}, rng)


def _oim(rng):
    L, Q, D, M = int(rng.integers(1, 6)), int(rng.integers(0, 4)), 6, int(rng.integers(1, 4))
    bank = IdentityBank.create(L, Q, D, rng, tau=float(rng.choice([1.0, 0.2])))
    bank.U = rng.normal(size=(Q, D)) * 0.3
    labels = rng.integers(0, L, size=M)
    gamma = float(rng.choice([0.0, 2.0]))
    return check_instance(
        lambda x: oim_loss_tensor(nx.l2_normalize(x), labels, bank, gamma), {"x": rng.normal(size=(M, D))}, rng
    )


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "softmax": _softmax,
    "bilinear_sample": _bilinear,
    "linear": _linear,
    "layer_norm": _layer_norm,
    "conv2d": _conv,
    "deformable_conv": _deform_conv,
    "self_attention": _self_attention,
    "deformable_attention": _deformable,
    "part_attention_layer": _part_layer,
    "part_attention_block": _part_block,
    "encoder_stack": _encoder,
    "decoder_stack": _decoder,
    "reid_decoder": _reid_decoder,
    "focal_classification": _focal,
    "giou": _giou,
    "l1": _l1,
    "oim_loss": _oim,
}


def run_gradcheck(instances: int = 20, seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        if only and name not in only:
            continue
        rng = nx.make_rng(seed * 1000 + i)
        t0 = time.time()
        worst = 0.0
        with nx.default_dtype(np.float64):
            for _ in range(instances):
                worst = max(worst, fn(rng))
        results.append(CheckResult(name, instances, worst, time.time() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'operation':<24} {'n':>3} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.instances:>3} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
