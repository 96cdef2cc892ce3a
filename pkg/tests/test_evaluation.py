import logging
from fractions import Fraction

import numpy as np
import pytest

from pstr.data import DatasetManifest, generate_dataset
from pstr.evaluation import (
    GalleryCandidate,
    Prediction,
    average_precision,
    evaluate_detection,
    evaluate_search,
    gallery_size_sweep,
    rank_gallery,
    search,
    select_query_feature,
    write_results_csv,
    write_summary_csv,
)

from oracles import brute_force_search

BOX = np.array([0.5, 0.5, 0.2, 0.4])


def cand(scene, box=BOX, sim=0.0, idx=0):
    return GalleryCandidate(scene, idx, np.asarray(box, dtype=float), 1.0, sim)


def unit(*v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# -- query feature ---------------------------------------------------------
def test_query_feature_exact_box():
    pred = Prediction(np.array([0.9, 0.1]), np.array([[0.2, 0.2, 0.1, 0.1], BOX]), np.eye(2))
    np.testing.assert_array_equal(select_query_feature(pred, BOX), [0, 1])


def test_query_feature_highest_iou():
    boxes = np.array([[0.5, 0.5, 0.2, 0.36], [0.6, 0.5, 0.2, 0.4]])
    pred = Prediction(np.array([0.1, 0.9]), boxes, np.eye(2))
    np.testing.assert_array_equal(select_query_feature(pred, BOX), [1, 0])


def test_query_feature_iou_tie_goes_to_score():
    pred = Prediction(np.array([0.2, 0.8]), np.array([BOX, BOX]), np.eye(2))
    np.testing.assert_array_equal(select_query_feature(pred, BOX), [0, 1])


def test_query_feature_fallback_warns(caplog):
    pred = Prediction(np.array([0.2, 0.8]), np.array([[0.1, 0.1, 0.05, 0.05], [0.9, 0.9, 0.05, 0.05]]), np.eye(2))
    with caplog.at_level(logging.WARNING):
        np.testing.assert_array_equal(select_query_feature(pred, BOX), [0, 1])
    assert "overlaps no prediction" in caplog.text


# -- ranking ---------------------------------------------------------------
def test_ranking_by_similarity():
    q = unit(1, 0)
    feats = np.stack([unit(0.9, np.sqrt(1 - 0.81)), unit(-0.2, np.sqrt(1 - 0.04)), unit(0.4, np.sqrt(1 - 0.16))])
    pred = Prediction(np.ones(3), np.tile(BOX, (3, 1)), feats)
    r = rank_gallery(q, {0: pred})
    assert [c.box_index for c in r] == [0, 2, 1]
    np.testing.assert_allclose([c.similarity for c in r], [0.9, 0.4, -0.2])


def test_ranking_identity_and_orthogonal():
    pred = Prediction(np.ones(2), np.tile(BOX, (2, 1)), np.eye(2))
    r = rank_gallery(np.array([1.0, 0.0]), {3: pred})
    assert (r[0].box_index, r[0].similarity) == (0, 1.0)
    assert r[1].similarity == 0.0


def test_ranking_thresholds_and_ties():
    feats = np.tile(unit(1, 1), (2, 1))
    g = {5: Prediction(np.array([0.5, 0.5]), np.tile(BOX, (2, 1)), feats), 2: Prediction(np.array([0.5, 0.1]), np.tile(BOX, (2, 1)), feats)}
    r = rank_gallery(unit(1, 0), g)
    assert [(c.scene, c.box_index) for c in r] == [(2, 0), (5, 0), (5, 1)]
    assert rank_gallery(unit(1, 0), {0: Prediction(np.array([0.1]), BOX[None], feats[:1])}) == []


def test_ranking_invariant_to_positive_scaling():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(6, 4))
    pred = Prediction(np.ones(6), np.tile(BOX, (6, 1)), feats)
    q = rng.normal(size=4)
    a = [c.box_index for c in rank_gallery(q, {0: pred})]
    b = [c.box_index for c in rank_gallery(3.7 * q, {0: pred})]
    assert a == b


# -- search AP -------------------------------------------------------------
def test_single_gt_rank_one():
    res = evaluate_search([[cand(0), cand(1)]], [{0: BOX[None]}])
    assert (res.mAP, res.top1) == (1.0, 1.0)


def test_single_gt_rank_two():
    res = evaluate_search([[cand(1), cand(0)]], [{0: BOX[None]}])
    assert (res.mAP, res.top1) == (0.5, 0.0)


def test_two_matches_at_ranks_one_and_three():
    ranking = [cand(0), cand(1), cand(2), cand(3)]
    res = evaluate_search([ranking], [{0: BOX[None], 2: BOX[None]}])
    assert res.mAP == pytest.approx(0.8333, abs=5e-5)
    assert res.mAP == float((Fraction(1, 1) + Fraction(2, 3)) / 2)


def test_gt_box_claimed_once():
    ranking = [cand(0, idx=0), cand(0, idx=1)]
    assert [c.correct for c in [*ranking]] == [False, False]
    evaluate_search([ranking], [{0: BOX[None]}])
    assert [c.correct for c in ranking] == [True, False]


def test_low_overlap_is_a_miss():
    res = evaluate_search([[cand(0, box=[0.5, 0.5, 0.2, 0.15])]], [{0: BOX[None]}])
    assert res.mAP == 0.0


def test_query_without_ground_truth_is_skipped(caplog):
    with caplog.at_level(logging.WARNING):
        res = evaluate_search([[cand(0)], [cand(0)]], [{}, {0: BOX[None]}], query_ids=[7, 8])
    assert res.query_ids == [8]
    assert "query 7" in caplog.text


def test_ap_counts_missed_ground_truth():
    assert average_precision([True], 2) == 0.5
    with pytest.raises(ValueError):
        average_precision([True], 0)


def _random_instance(rng):
    n_scenes = int(rng.integers(1, 5))
    palette = np.stack([unit(np.cos(a), np.sin(a)) for a in np.linspace(0, np.pi, 5)])
    gallery, gt = {}, {}
    for s in range(n_scenes):
        k = int(rng.integers(0, 4))
        boxes = np.column_stack([rng.uniform(0.2, 0.8, (k, 2)), rng.uniform(0.1, 0.3, (k, 2))])
        gallery[s] = (rng.choice([0.1, 0.5, 0.9], size=k), boxes, palette[rng.integers(0, 5, size=k)])
        truth = [b + rng.normal(0, 0.03, 4) * [1, 1, 0.3, 0.3] for b in boxes if rng.uniform() < 0.4]
        if rng.uniform() < 0.3:
            truth.append(np.array([0.5, 0.5, 0.2, 0.2]))
        if truth:
            gt[s] = np.array(truth)
    if not gt:
        gt[0] = np.array([[0.5, 0.5, 0.2, 0.2]])
    return unit(1, rng.uniform(-1, 1)), gallery, gt


def run_brute_force_case(rng):
    n_queries = int(rng.integers(1, 6))
    rankings, truths, expect = [], [], []
    for _ in range(n_queries):
        q, gallery, gt = _random_instance(rng)
        preds = {s: Prediction(*v) for s, v in gallery.items()}
        rankings.append(rank_gallery(q, preds, 0.3)[:10])
        truths.append(gt)
        # the oracle works from the same top-10 cut
        cut = {(c.scene, c.box_index) for c in rankings[-1]}
        trimmed = {s: tuple(np.asarray(a)[[j for j in range(len(v[0])) if (s, j) in cut]] for a in v) for s, v in gallery.items()}
        expect.append(brute_force_search(q, trimmed, {s: list(b) for s, b in gt.items()}))
    res = evaluate_search(rankings, truths)
    return res, expect


@pytest.mark.parametrize("seed", range(10))
def test_search_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(5):
        res, expect = run_brute_force_case(rng)
        assert res.ap == [e[0] for e in expect]
        assert res.top1_hits == [e[1] for e in expect]
        assert 0.0 <= res.mAP <= 1.0 and 0.0 <= res.top1 <= 1.0


# -- detection AP ----------------------------------------------------------
def test_detection_perfect_and_empty():
    gts = [np.array([BOX, [0.2, 0.2, 0.1, 0.1]])]
    assert evaluate_detection([Prediction(np.array([0.9, 0.8]), gts[0], np.zeros((2, 1)))], gts) == 1.0
    assert evaluate_detection([Prediction(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 1)))], gts) == 0.0


def test_detection_half_recall():
    gts = [np.array([BOX, [0.2, 0.2, 0.1, 0.1]])]
    preds = [Prediction(np.array([0.9, 0.1]), np.array([BOX, [0.8, 0.8, 0.1, 0.1]]), np.zeros((2, 1)))]
    assert evaluate_detection(preds, gts) == 0.5


# -- dataset-level ---------------------------------------------------------
@pytest.fixture(scope="module")
def toy():
    return generate_dataset(DatasetManifest(num_train_scenes=8, num_labeled=4, num_unlabeled=2, num_test_distractor_scenes=8))


def oracle_preds(ds):
    """Predictions equal to ground truth with one-hot identity features."""
    out = []
    for s in ds.test:
        boxes = np.array([p.box for p in s.persons])
        feats = np.zeros((len(boxes), 16))
        for i, p in enumerate(s.persons):
            feats[i, p.identity_id if p.identity_id >= 0 else 8 + i] = 1.0
        out.append(Prediction(np.full(len(boxes), 0.9), boxes, feats))
    return out


def test_perfect_predictions_score_one(toy):
    res = search(toy, oracle_preds(toy), 10)
    assert (res.mAP, res.top1) == (1.0, 1.0)


def test_gallery_sweep(toy):
    preds = oracle_preds(toy)
    results = gallery_size_sweep(toy, preds, [1, 5, 10])
    assert [r.gallery_size for r in results] == [1, 5, 10]
    with pytest.raises(ValueError, match="not achievable"):
        gallery_size_sweep(toy, preds, [toy.manifest.max_gallery + 1])


def test_size_one_gallery_is_the_match_scene(toy):
    res = search(toy, oracle_preds(toy), 1)
    for qid, ranking in zip(res.query_ids, res.rankings):
        assert {c.scene for c in ranking} == {toy.galleries[qid][0]}


def test_csv_outputs(tmp_path, toy):
    results = gallery_size_sweep(toy, oracle_preds(toy), [2, 5])
    write_results_csv(tmp_path / "r.csv", results)
    write_summary_csv(tmp_path / "s.csv", results, det_ap=1.0)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "gallery_size,query_id,rank,scene,similarity,correct"
    assert (tmp_path / "s.csv").read_text().splitlines() == [
        "gallery_size,mAP,top1,det_AP50",
        "2,1.000000,1.000000,1.000000",
        "5,1.000000,1.000000,1.000000",
    ]


def test_identical_rows_get_bit_equal_similarity():
    rng = np.random.default_rng(1)
    v = unit(*rng.normal(size=96))
    feats = rng.normal(size=(40, 96))
    feats[[3, 17, 38]] = v
    pred = Prediction(np.ones(40), np.tile(BOX, (40, 1)), feats)
    r = rank_gallery(unit(*rng.normal(size=96)), {0: pred})
    sims = {c.box_index: c.similarity for c in r}
    assert sims[3] == sims[17] == sims[38]
    tied = [c.box_index for c in r if c.box_index in (3, 17, 38)]
    assert tied == [3, 17, 38]
