import math

import numpy as np
import pytest

from spikevpr.events import PLANAR, GeoPose
from spikevpr.evaluation import (
    PRPoint,
    RetrievalResult,
    evaluate,
    f1_max,
    match_all,
    pr_curve,
    rank_descriptors,
    recall_at_n,
    sweep_thresholds,
    write_pr_csv,
    write_reports_csv,
)


def planar(x):
    return GeoPose(0, float(x), 0.0, PLANAR)


def result_from(ranking, d1, q_x, db_x):
    ranking = np.asarray(ranking)
    dist = np.tile(np.asarray(d1, dtype=float)[:, None], (1, ranking.shape[1]))
    dist += np.arange(ranking.shape[1]) * 1e-3
    return RetrievalResult(ranking, dist, [planar(x) for x in q_x], [planar(x) for x in db_x])


# --- recall ------------------------------------------------------------------


def test_recall_perfect_twins():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(6, 8))
    res = match_all(d + 1e-3, d, [planar(100 * i) for i in range(6)], [planar(100 * i + 3) for i in range(6)])
    assert recall_at_n(res, 1) == 1.0


def test_recall_impossible():
    res = match_all(np.eye(3), np.eye(3), [planar(0)] * 3, [planar(1000 + i) for i in range(3)])
    assert all(recall_at_n(res, n) == 0.0 for n in (1, 2, 3))


def test_recall_at_5_counted_case():
    # 4 queries at x=0; db 0..9, the only true positive (x=0) sits at rank 3, 2, 7, 1 respectively
    db_x = [0] + [1000 + i for i in range(9)]
    rankings = []
    for rank in (3, 2, 7, 1):
        order = [d for d in range(1, 10)]
        order.insert(rank - 1, 0)
        rankings.append(order)
    res = result_from(rankings, [0.1] * 4, [0] * 4, db_x)
    assert recall_at_n(res, 5) == 0.75


def test_infinite_threshold_counts_everything():
    res = result_from([[1, 0], [0, 1]], [0.1, 0.2], [0, 500], [5000, 9000])
    assert sweep_thresholds(res, [10, math.inf])[-1].recall[1] == 1.0


def test_hand_labelled_three_queries():
    # rank-1 matches lie 5 m, 50 m and 500 m away from their queries
    res = result_from([[0], [1], [2]], [0.1, 0.2, 0.3], [0, 1000, 2000], [5, 1050, 2500])
    r10, r100 = sweep_thresholds(res, [10, 100])
    assert r10.recall[1] == pytest.approx(1 / 3) and r100.recall[1] == pytest.approx(2 / 3)


def test_recall_monotone_random():
    g = np.random.default_rng(4)
    for _ in range(20):
        q, d = g.normal(size=(15, 6)), g.normal(size=(25, 6))
        res = match_all(q, d, [planar(x) for x in g.uniform(0, 500, 15)], [planar(x) for x in g.uniform(0, 500, 25)])
        reports = sweep_thresholds(res, [15, 30, 45, 60, 75])
        for rep in reports:
            vals = [rep.recall[n] for n in (1, 5, 10, 20)]
            assert vals == sorted(vals)
        for n in (1, 5, 10, 20):
            vals = [rep.recall[n] for rep in reports]
            assert vals == sorted(vals)


def test_sweep_validates_thresholds():
    res = result_from([[0]], [0.1], [0], [0])
    with pytest.raises(ValueError):
        sweep_thresholds(res, [30, 15])
    with pytest.raises(ValueError):
        sweep_thresholds(res, [0, 15])


# --- ranking -----------------------------------------------------------------


def test_ranking_ties_broken_by_db_index():
    d = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    ranking, dist = rank_descriptors(np.array([[1.0, 0.0]]), d)
    assert ranking[0].tolist() == [0, 2, 1, 3]
    assert dist[0, 0] == 0.0


def test_empty_database():
    with pytest.raises(ValueError):
        rank_descriptors(np.zeros((2, 3)), np.zeros((0, 3)))


def test_ranking_invariant_to_positive_rescaling_of_unit_vectors():
    g = np.random.default_rng(2)
    q = g.normal(size=(10, 5))
    d = g.normal(size=(30, 5))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r1, _ = rank_descriptors(q, d)
    r2, _ = rank_descriptors(3.0 * q, 3.0 * d)
    assert np.array_equal(r1[:, 0], r2[:, 0])
    cos = q @ d.T
    assert np.array_equal(r1[:, 0], np.argmax(cos, axis=1))


# --- PR and F1 ---------------------------------------------------------------


def test_pr_toy_enumeration():
    # 2 correct at d = 0.1 / 0.2, 2 wrong at d = 0.15 / 0.3
    res = result_from([[0], [1], [2], [3]], [0.1, 0.2, 0.15, 0.3], [0, 100, 200, 300], [0, 100, 900, 1300])
    pts = {round(p.tau, 6): p for p in pr_curve(res, 75)}
    assert pts[0.2].precision == pytest.approx(2 / 3)
    assert pts[0.2].recall == pytest.approx(1 / 2)
    taus = [p.tau for p in pr_curve(res, 75)]
    assert taus == sorted(taus)


def test_pr_perfect_and_broken():
    good = result_from([[0], [1]], [0.1, 0.2], [0, 100], [0, 100])
    pts = pr_curve(good, 75)
    assert all(p.precision == 1.0 for p in pts) and pts[-1].recall == 1.0
    bad = result_from([[1], [0]], [0.1, 0.2], [0, 100], [0, 100])
    assert all(p.precision == 0.0 for p in pr_curve(bad, 75))


def test_pr_recall_non_decreasing_random():
    g = np.random.default_rng(8)
    q, d = g.normal(size=(30, 4)), g.normal(size=(30, 4))
    res = match_all(q, d, [planar(x) for x in g.uniform(0, 300, 30)], [planar(x) for x in g.uniform(0, 300, 30)])
    pts = pr_curve(res, 75)
    assert all(a.recall <= b.recall for a, b in zip(pts, pts[1:]))
    assert all(0 <= p.precision <= 1 for p in pts)
    best = f1_max(pts)
    for p in pts:
        if p.precision + p.recall:
            assert best >= 2 * p.precision * p.recall / (p.precision + p.recall) - 1e-15


def test_f1_examples():
    assert f1_max([PRPoint(0, 1.0, 1.0)]) == 1.0
    assert f1_max([(1.0, 0.5), (0.5, 1.0)]) == pytest.approx(2 / 3)
    assert f1_max([(0.0, 0.0), (0.0, 0.0)]) == 0.0


def test_pr_needs_queries():
    res = RetrievalResult(np.zeros((0, 2), int), np.zeros((0, 2)), [], [planar(0), planar(1)])
    with pytest.raises(ValueError):
        pr_curve(res)


# --- reports -----------------------------------------------------------------


def test_report_files(tmp_path):
    res = result_from([[0, 1], [1, 0]], [0.1, 0.2], [0, 100], [0, 100])
    reports = sweep_thresholds(res, [15, 75])
    write_reports_csv(reports, tmp_path / "m.csv")
    write_pr_csv(reports[0].pr, tmp_path / "pr.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "phi,recall@1,recall@5,recall@10,recall@20,f1_max,queries,skipped"
    assert len(lines) == 3
    assert (tmp_path / "pr.csv").read_text().startswith("tau,precision,recall\n")
    rep = evaluate(res, 75)
    assert rep.queries == 2 and 0 <= rep.f1_max <= 1
