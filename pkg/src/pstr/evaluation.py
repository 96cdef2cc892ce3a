"""Query/gallery person-search scoring and single-class detection AP.

Protocol: gallery candidates are set predictions with score >= threshold
(no NMS).  A ranked candidate is a true positive when it overlaps an
unclaimed ground-truth box of the query identity in the same scene with
IoU >= 0.5.  AP is the mean of precision at each true positive, divided
by the number of ground-truth boxes (missed boxes count against recall);
no precision interpolation.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import Dataset
from .loss import box_iou

log = logging.getLogger(__name__)


@dataclass
class Prediction:
    scores: np.ndarray  # (N,)
    boxes: np.ndarray  # (N, 4) cxcywh
    features: np.ndarray  # (N, D) unit rows


@dataclass
class GalleryCandidate:
    scene: int
    box_index: int
    box: np.ndarray
    score: float
    similarity: float
    correct: bool = False


@dataclass
class SearchResult:
    gallery_size: int
    ap: list[float] = field(default_factory=list)
    top1_hits: list[bool] = field(default_factory=list)
    rankings: list[list[GalleryCandidate]] = field(default_factory=list)
    query_ids: list[int] = field(default_factory=list)

    @property
    def mAP(self) -> float:
        return float(np.mean(self.ap)) if self.ap else 0.0

    @property
    def top1(self) -> float:
        return float(np.mean(self.top1_hits)) if self.top1_hits else 0.0


def run_inference(model, images: np.ndarray, batch_size: int = 8) -> list[Prediction]:
    """All N raw set predictions per image; thresholding is left to callers."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    from . import numerics as nx

    dtype = model.parameters()[0].dtype
    preds = []
    for i in range(0, len(images), batch_size):
        with nx.default_dtype(dtype.type):
            for p in model.predict(images[i : i + batch_size].astype(dtype)):
                preds.append(Prediction(p["scores"], p["boxes"], p["features"]))
    return preds


def select_query_feature(pred: Prediction, query_box) -> np.ndarray:
    """Feature of the prediction overlapping ``query_box`` most.

    Ties on IoU go to the higher score.  When nothing overlaps the
    highest-scoring prediction is used and a warning is logged.
    """
    ious = np.atleast_1d(box_iou(np.asarray(query_box)[None], pred.boxes)).reshape(-1)
    if not np.any(ious > 0):
        log.warning("query box overlaps no prediction; using the top-scoring one")
        return pred.features[int(np.argmax(pred.scores))]
    order = np.lexsort((-pred.scores, -ious))
    return pred.features[int(order[0])]


def rank_gallery(query_feature, gallery: dict[int, Prediction], score_thresh: float = 0.3) -> list[GalleryCandidate]:
    """Candidates from every gallery scene sorted by descending cosine similarity.

    Equal similarities keep (scene id, box index) order.
    """
    q = np.asarray(query_feature, dtype=np.float64)
    cands = []
    for scene in sorted(gallery):
        pred = gallery[scene]
        keep = np.nonzero(pred.scores >= score_thresh)[0]
        if not len(keep):
            continue
        # row-wise fsum: equal feature rows get bit-equal similarities, so ties hold
        sims = [math.fsum(row) for row in pred.features[keep].astype(np.float64) * q]
        for j, s in zip(keep, sims):
            cands.append(GalleryCandidate(scene, int(j), pred.boxes[j], float(pred.scores[j]), float(s)))
    # stable sort preserves the (scene, box) insertion order among ties
    cands.sort(key=lambda c: -c.similarity)
    return cands


def average_precision(correct: list[bool], num_gt: int) -> float:
    if num_gt <= 0:
        raise ValueError("AP needs at least one ground-truth box")
    # exact rational sum, rounded once, so equal PR curves give equal floats
    hits = 0
    total = Fraction(0)
    for rank, ok in enumerate(correct, 1):
        if ok:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / num_gt)


def mark_correct(ranking: list[GalleryCandidate], gt: dict[int, np.ndarray], iou_thresh: float = 0.5) -> list[bool]:
    """Flag true positives in rank order; each GT box can be claimed once."""
    claimed = {scene: np.zeros(len(boxes), dtype=bool) for scene, boxes in gt.items()}
    flags = []
    for c in ranking:
        ok = False
        boxes = gt.get(c.scene)
        if boxes is not None and len(boxes):
            ious = np.atleast_1d(box_iou(np.asarray(c.box)[None], np.asarray(boxes))).reshape(-1)
            ious = np.where(claimed[c.scene], -1.0, ious)
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh:
                claimed[c.scene][j] = True
                ok = True
        c.correct = ok
        flags.append(ok)
    return flags


def evaluate_search(
    rankings: list[list[GalleryCandidate]],
    ground_truth: list[dict[int, np.ndarray]],
    gallery_size: int = 0,
    iou_thresh: float = 0.5,
    query_ids: list[int] | None = None,
) -> SearchResult:
    """Per-query AP, mAP and top-1 from ranked candidates.

    ``ground_truth[i]`` maps gallery scene -> (k, 4) boxes of query i's
    identity.  Queries without any ground truth are skipped with a warning.
    """
    res = SearchResult(gallery_size)
    ids = query_ids if query_ids is not None else list(range(len(rankings)))
    for qid, ranking, gt in zip(ids, rankings, ground_truth):
        num_gt = int(sum(len(b) for b in gt.values()))
        if num_gt == 0:
            log.warning("query %s has no ground-truth match in its gallery; skipped", qid)
            continue
        flags = mark_correct(ranking, gt, iou_thresh)
        res.ap.append(average_precision(flags, num_gt))
        res.top1_hits.append(bool(flags and flags[0]))
        res.rankings.append(ranking)
        res.query_ids.append(qid)
    return res


def evaluate_detection(preds: list[Prediction], gts: list[np.ndarray], iou_thresh: float = 0.5, score_thresh: float = 0.0) -> float:
    """Single-class AP with greedy, score-ordered matching across all images."""
    num_gt = int(sum(len(g) for g in gts))
    if num_gt == 0:
        raise ValueError("detection AP needs ground truth")
    dets = []
    for i, p in enumerate(preds):
        for j in np.nonzero(p.scores >= score_thresh)[0]:
            dets.append((-float(p.scores[j]), i, int(j)))
    dets.sort()
    claimed = [np.zeros(len(g), dtype=bool) for g in gts]
    flags = []
    for _, i, j in dets:
        g = gts[i]
        ok = False
        if len(g):
            ious = np.atleast_1d(box_iou(preds[i].boxes[j][None], g)).reshape(-1)
            ious = np.where(claimed[i], -1.0, ious)
            k = int(np.argmax(ious))
            if ious[k] >= iou_thresh:
                claimed[i][k] = True
                ok = True
        flags.append(ok)
    return average_precision(flags, num_gt)


# -- dataset-level drivers -----------------------------------------------
def predict_test_split(model, dataset: Dataset, batch_size: int = 8) -> list[Prediction]:
    images = np.stack([s.image for s in dataset.test])
    return run_inference(model, images, batch_size)


def detection_ap(dataset: Dataset, preds: list[Prediction], score_thresh: float = 0.0) -> float:
    """Detection AP over the gallery scenes (every non-query test scene)."""
    query_scenes = {q.scene for q in dataset.queries}
    idx = [i for i in range(len(dataset.test)) if i not in query_scenes]
    gts = [np.array([p.box for p in dataset.test[i].persons]).reshape(-1, 4) for i in idx]
    return evaluate_detection([preds[i] for i in idx], gts, score_thresh=score_thresh)


def search(
    dataset: Dataset, preds: list[Prediction], gallery_size: int, score_thresh: float = 0.3, iou_thresh: float = 0.5
) -> SearchResult:
    rankings, gts, qids = [], [], []
    for q in dataset.queries:
        qfeat = select_query_feature(preds[q.scene], q.box)
        scenes = dataset.gallery(q.query_id, gallery_size)
        rankings.append(rank_gallery(qfeat, {s: preds[s] for s in scenes}, score_thresh))
        gt = {}
        for s in scenes:
            boxes = [p.box for p in dataset.test[s].persons if p.identity_id == q.identity_id]
            if boxes:
                gt[s] = np.array(boxes)
        gts.append(gt)
        qids.append(q.query_id)
    return evaluate_search(rankings, gts, gallery_size, iou_thresh=iou_thresh, query_ids=qids)


def gallery_size_sweep(
    dataset: Dataset, preds: list[Prediction], sizes, score_thresh: float = 0.3, iou_thresh: float = 0.5
) -> list[SearchResult]:
    out = []
    for size in sizes:
        avail = min(len(g) for g in dataset.galleries.values())
        if size < 1 or size > avail:
            raise ValueError(f"gallery size {size} not achievable (1..{avail})")
        out.append(search(dataset, preds, size, score_thresh, iou_thresh))
    return out


def write_results_csv(path, results: list[SearchResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gallery_size", "query_id", "rank", "scene", "similarity", "correct"])
        for res in results:
            for qid, ranking in zip(res.query_ids, res.rankings):
                for rank, c in enumerate(ranking, 1):
                    w.writerow([res.gallery_size, qid, rank, c.scene, f"{c.similarity:.9f}", int(c.correct)])


def write_summary_csv(path, results: list[SearchResult], det_ap: float | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gallery_size", "mAP", "top1"] + (["det_AP50"] if det_ap is not None else []))
        for res in results:
            row = [res.gallery_size, f"{res.mAP:.6f}", f"{res.top1:.6f}"]
            if det_ap is not None:
                row.append(f"{det_ap:.6f}")
            w.writerow(row)


def summarize(path) -> list[dict[str, str]]:
    with open(Path(path)) as fh:
        return list(csv.DictReader(fh))
