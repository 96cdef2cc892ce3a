"""Detection losses under Hungarian set matching, plus the OIM identity bank."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .detector import DecoderFeatures
from .numerics import Tensor
from .reid import ReidFeatures

UNLABELED = -1


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    iou: float = 5.0
    l1: float = 2.0
    oim: float = 0.5

    def __post_init__(self):
        if min(self.cls, self.iou, self.l1, self.oim) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = LossWeights()
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    oim_focal_gamma: float = 2.0
    tau: float = 1.0 / 30.0
    momentum: float = 0.5
    queue_size: int = 32
    aux_loss: bool = True


# -- boxes ---------------------------------------------------------------
def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2, b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)


def _pairwise_xyxy(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    hull_lt = np.minimum(a[:, None, :2], b[None, :, :2])
    hull_rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull = np.prod(np.clip(hull_rb - hull_lt, 0, None), axis=-1)
    giou = iou - np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return iou, giou


def box_iou(a, b, fmt: str = "cxcywh") -> np.ndarray:
    """Pairwise IoU matrix (or scalar for two single boxes)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    single = a.ndim == 1 and b.ndim == 1
    if fmt == "cxcywh":
        a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    iou, _ = _pairwise_xyxy(a, b)
    return float(iou[0, 0]) if single else iou


def giou(a, b, fmt: str = "cxcywh") -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    single = a.ndim == 1 and b.ndim == 1
    if fmt == "cxcywh":
        a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    _, g = _pairwise_xyxy(a, b)
    return float(g[0, 0]) if single else g


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise GIoU of matched (M, 4) cxcywh boxes, differentiable in ``pred``."""
    target = cxcywh_to_xyxy(target)
    cx, cy, w, h = (pred[:, i] for i in range(4))
    px0, py0, px1, py1 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    tx0, ty0, tx1, ty1 = (target[:, i] for i in range(4))
    area_p = w * h
    area_t = (tx1 - tx0) * (ty1 - ty0)
    iw = nx.relu(nx.minimum(px1, tx1) - nx.maximum(px0, tx0))
    ih = nx.relu(nx.minimum(py1, ty1) - nx.maximum(py0, ty0))
    inter = iw * ih
    union = area_p + area_t - inter
    hw = nx.maximum(px1, tx1) - nx.minimum(px0, tx0)
    hh = nx.maximum(py1, ty1) - nx.minimum(py0, ty0)
    hull = hw * hh
    return inter / union - (hull - union) / hull


# -- matching ------------------------------------------------------------
def match_cost(score, box, target, weights: LossWeights = LossWeights()):
    """Cost of assigning a prediction to a target; broadcasts to (T, N).

    ``score``/``box`` may be a single prediction or arrays (N,), (N, 4);
    ``target`` a single box or (T, 4).
    """
    score = np.asarray(score, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if box.ndim == 1 and target.ndim == 1:
        return float(
            weights.cls * -score
            + weights.iou * (1.0 - giou(box, target))
            + weights.l1 * np.abs(box - target).sum()
        )
    box = box.reshape(-1, 4)
    target = target.reshape(-1, 4)
    g = giou(target, box)  # (T, N)
    l1 = np.abs(target[:, None, :] - box[None, :, :]).sum(-1)
    return weights.cls * -score.reshape(1, -1) + weights.iou * (1.0 - g) + weights.l1 * l1


@dataclass
class Assignment:
    """Injective target -> query map and its total cost."""

    pairs: dict[int, int]
    cost: float

    @property
    def targets(self) -> np.ndarray:
        return np.array(sorted(self.pairs), dtype=np.int64)

    @property
    def queries(self) -> np.ndarray:
        return np.array([self.pairs[t] for t in sorted(self.pairs)], dtype=np.int64)


def _lsa_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian_assign(cost) -> Assignment:
    """Minimum-cost injective assignment of T targets (rows) to N queries.

    Among equal-cost optima the lexicographically smallest one wins: target
    0 takes the lowest feasible query index, then target 1, and so on.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a T x N matrix, got shape {cost.shape}")
    T, N = cost.shape
    if T > N:
        raise ValueError(f"cannot assign {T} targets to {N} queries")
    if T == 0:
        return Assignment({}, 0.0)
    opt = _lsa_cost(cost)
    tol = 1e-12 * max(1.0, abs(opt), float(np.abs(cost).max()))
    free = list(range(N))
    pairs: dict[int, int] = {}
    spent = 0.0
    for t in range(T):
        rest_rows = cost[t + 1 :]
        for q in free:
            cols = [c for c in free if c != q]
            total = spent + cost[t, q] + _lsa_cost(rest_rows[:, cols])
            if total <= opt + tol:
                pairs[t] = q
                spent += cost[t, q]
                free.remove(q)
                break
        else:  # numerical corner; fall back to the solver's own answer
            r, c = linear_sum_assignment(cost)
            pairs = dict(zip(r.tolist(), c.tolist()))
            break
    total = 0.0
    for t in range(T):
        total += cost[t, pairs[t]]
    return Assignment(pairs, float(total))


# -- identity bank -------------------------------------------------------
@dataclass
class IdentityBank:
    """Lookup table ``V`` of labeled prototypes plus circular queue ``U``.

    Buffers only; no gradient ever reaches them.
    """

    V: np.ndarray
    U: np.ndarray
    tau: float = 1.0 / 30.0
    gamma: float = 0.5
    head: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("momentum gamma must lie in (0, 1)")
        if self.tau <= 0:
            raise ValueError("temperature tau must be positive")

    @classmethod
    def create(cls, num_labeled: int, queue_size: int, dim: int, rng, tau=1.0 / 30.0, gamma=0.5) -> IdentityBank:
        V = rng.normal(size=(num_labeled, dim))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        return cls(V, np.zeros((queue_size, dim)), tau, gamma)

    @property
    def L(self) -> int:
        return self.V.shape[0]

    @property
    def Q(self) -> int:
        return self.U.shape[0]

    def table(self) -> np.ndarray:
        return np.concatenate([self.V, self.U], axis=0)

    def copy(self) -> IdentityBank:
        return IdentityBank(self.V.copy(), self.U.copy(), self.tau, self.gamma, self.head)


def oim_probabilities(x, bank: IdentityBank) -> np.ndarray:
    """softmax([V x ; U x] / tau) for a unit feature ``x`` (D,) or rows (M, D)."""
    x = np.asarray(x, dtype=np.float64)
    logits = x @ bank.table().T / bank.tau
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def oim_loss(p, t: int, focal_gamma: float = 0.0) -> float:
    """-(1 - p_t)^gamma * log p_t for a probability vector over L+Q entries."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= t < p.shape[-1]:
        raise ValueError(f"identity index {t} outside [0, {p.shape[-1]})")
    pt = p[t]
    if pt >= 1.0:
        return 0.0
    return float(-((1.0 - pt) ** focal_gamma) * np.log(pt))


def oim_loss_tensor(feats: Tensor, labels: np.ndarray, bank: IdentityBank, focal_gamma: float) -> Tensor:
    """Mean focal-OIM over rows of ``feats`` (M, D) with labeled ids ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= bank.L):
        raise ValueError("OIM labels must index the lookup table")
    table = nx.Tensor(bank.table().T / bank.tau, dtype=feats.dtype)
    logp = nx.log_softmax(nx.matmul(feats, table), axis=-1)
    logpt = logp[np.arange(len(labels)), labels]
    if focal_gamma:
        pt = nx.exp(logpt)
        w = nx.power(nx.clip(1.0 - pt, 0.0, 1.0), focal_gamma)
        return -(w * logpt).mean()
    return -logpt.mean()


def bank_update(bank: IdentityBank, feats: np.ndarray, labels) -> IdentityBank:
    """Momentum-update ``V`` rows for labeled features; enqueue unlabeled ones.

    Mutates and returns ``bank``.
    """
    feats = np.asarray(feats, dtype=np.float64).reshape(-1, bank.V.shape[1])
    for x, t in zip(feats, np.asarray(labels).reshape(-1)):
        t = int(t)
        if t == UNLABELED:
            if bank.Q:
                bank.U[bank.head] = x
                bank.head = (bank.head + 1) % bank.Q
            continue
        if not 0 <= t < bank.L:
            raise ValueError(f"identity {t} outside lookup table of size {bank.L}")
        v = bank.gamma * bank.V[t] + (1.0 - bank.gamma) * x
        n = np.linalg.norm(v)
        if n > 0:
            bank.V[t] = v / n
    return bank


# -- detection losses ----------------------------------------------------
def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss over all elements of ``logits``."""
    y = np.asarray(targets, dtype=np.float64)
    p = nx.sigmoid(logits)
    ce = -(nx.log_sigmoid(logits) * y + nx.log_sigmoid(-logits) * (1.0 - y))
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return (ce * nx.power(1.0 - p_t, gamma) * alpha_t).sum() if gamma else (ce * alpha_t).sum()


@dataclass
class LossBreakdown:
    cls: float
    iou: float
    l1: float
    oim: float
    total: float

    def as_row(self) -> dict[str, float]:
        return {"L_cls": self.cls, "L_iou": self.iou, "L_l1": self.l1, "L_oim": self.oim, "total": self.total}


@dataclass
class Target:
    boxes: np.ndarray  # (T, 4) cxcywh normalized
    ids: np.ndarray  # (T,) identity index or UNLABELED


@dataclass
class LossOutput:
    total: Tensor
    breakdown: LossBreakdown
    matches: dict[int, list[Assignment]] = field(default_factory=dict)


def match_level(logits: np.ndarray, boxes: np.ndarray, targets: list[Target], weights: LossWeights) -> list[Assignment]:
    scores = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    out = []
    for b, tgt in enumerate(targets):
        if len(tgt.boxes) == 0:
            out.append(Assignment({}, 0.0))
            continue
        out.append(hungarian_assign(match_cost(scores[b], boxes[b], tgt.boxes, weights)))
    return out


def total_loss(
    det: DecoderFeatures,
    reid: ReidFeatures | None,
    targets: list[Target],
    banks: dict[str, IdentityBank],
    cfg: LossConfig = LossConfig(),
) -> LossOutput:
    """lambda-weighted sum of cls / GIoU / L1 / OIM, each averaged over levels.

    Detection terms are normalized by the number of targets in the batch; the
    OIM term at a level is the sum over scales of the mean focal-OIM over
    matched, labeled queries.
    """
    w = cfg.weights
    n_levels = len(det.logits)
    det_levels = list(range(1, n_levels + 1)) if cfg.aux_loss else [n_levels]
    num_t = max(1, sum(len(t.boxes) for t in targets))
    dtype = det.logits[0].dtype
    zero = nx.Tensor(0.0, dtype=dtype)
    cls_terms, iou_terms, l1_terms = [], [], []
    matches: dict[int, list[Assignment]] = {}
    for level in range(1, n_levels + 1):
        matches[level] = match_level(det.logits[level - 1].data, det.boxes[level - 1].data, targets, w)
    for level in det_levels:
        logits, boxes = det.logits[level - 1], det.boxes[level - 1]
        onehot = np.zeros(logits.shape)
        bi, qi, ti = _flat_matches(matches[level])
        onehot[bi, qi] = 1.0
        cls_terms.append(sigmoid_focal_loss(logits, onehot, cfg.focal_alpha, cfg.focal_gamma) * (1.0 / num_t))
        if len(bi):
            tgt = np.concatenate([targets[b].boxes[t][None] for b, t in zip(bi, ti)], axis=0)
            pred = boxes[bi, qi]
            iou_terms.append((1.0 - giou_tensor(pred, tgt)).sum() * (1.0 / num_t))
            l1_terms.append(nx.absolute(pred - tgt).sum() * (1.0 / num_t))
        else:
            iou_terms.append(zero)
            l1_terms.append(zero)
    oim_terms = []
    if reid is not None:
        levels = sorted({lv for lv, _ in reid.per_level})
        for level in levels:
            bi, qi, ti = _flat_matches(matches[level])
            ids = np.array([targets[b].ids[t] for b, t in zip(bi, ti)], dtype=np.int64)
            keep = ids != UNLABELED
            term = zero
            if keep.any():
                for (lv, scale), feats in sorted(reid.per_level.items()):
                    if lv != level:
                        continue
                    sel = feats[bi[keep], qi[keep]]
                    term = term + oim_loss_tensor(sel, ids[keep], banks[scale], cfg.oim_focal_gamma)
            oim_terms.append(term)
    L_cls = _avg(cls_terms)
    L_iou = _avg(iou_terms)
    L_l1 = _avg(l1_terms)
    L_oim = _avg(oim_terms) if oim_terms else zero
    total = L_cls * w.cls + L_iou * w.iou + L_l1 * w.l1 + L_oim * w.oim
    bd = LossBreakdown(L_cls.item(), L_iou.item(), L_l1.item(), L_oim.item(), total.item())
    return LossOutput(total, bd, matches)


def _avg(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def _flat_matches(assignments: list[Assignment]):
    bi, qi, ti = [], [], []
    for b, a in enumerate(assignments):
        for t in sorted(a.pairs):
            bi.append(b)
            qi.append(a.pairs[t])
            ti.append(t)
    return np.array(bi, dtype=np.int64), np.array(qi, dtype=np.int64), np.array(ti, dtype=np.int64)


def update_banks(reid: ReidFeatures, targets: list[Target], matches: dict[int, list[Assignment]], banks: dict[str, IdentityBank]) -> None:
    """Post-step bank refresh from the level-3 features of matched queries."""
    bi, qi, ti = _flat_matches(matches[3])
    if not len(bi):
        return
    ids = np.array([targets[b].ids[t] for b, t in zip(bi, ti)], dtype=np.int64)
    for scale, bank in banks.items():
        feats = reid.per_level[(3, scale)].data[bi, qi]
        bank_update(bank, feats, ids)
