import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_rank, loop_ssim, scan_eer

from splatmask.camera import ViewpointDistribution, default_frontal
from splatmask.evalharness import (
    Gallery,
    ScorePairs,
    accuracy_at_k,
    accuracy_from_ranks,
    build_synthetic_protocol,
    calibrate_eer,
    cosine_distance,
    evaluate_scene,
    far_frr,
    identity_name,
    match_rate,
    psnr,
    rank_of,
    rotation_grid_report,
    similarity_histogram,
    ssim,
)


def _unit_rows(rng, n, d=512):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _gallery(rng, n, n_ids):
    return Gallery([f"p{i % n_ids}" for i in range(n)], _unit_rows(rng, n))


def test_cosine_distance():
    assert cosine_distance([1, 0], [0, 1]) == 1.0
    assert cosine_distance([1, 0], [1, 0]) == 0.0


def test_gallery_validation(rng):
    with pytest.raises(ValueError):
        Gallery(["a"], np.ones((1, 512)))
    with pytest.raises(ValueError):
        Gallery(["a"], np.ones((1, 10)) / np.sqrt(10))
    g = _gallery(rng, 6, 3)
    assert g.identities == ["p0", "p1", "p2"] and g.of("p1").shape == (2, 512)
    with pytest.raises(ValueError):
        g.of("nobody")


def test_gallery_round_trip(tmp_path, rng):
    g = _gallery(rng, 7, 4)
    g.save(tmp_path / "g.bin")
    back = Gallery.load(tmp_path / "g.bin")
    assert back.ids == g.ids
    assert np.allclose(back.embeddings, g.embeddings, atol=1e-6)
    assert np.allclose(np.linalg.norm(back.embeddings, axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 60))
def test_rank_of_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    g = _gallery(rng, n, max(1, n // 3))
    q = rng.normal(size=512)
    true_id = g.ids[int(rng.integers(n))]
    assert rank_of(q, true_id, g) == brute_rank(q, true_id, g.ids, g.embeddings)


def test_rank_ties_keep_gallery_order():
    e = np.zeros(512)
    e[0] = 1.0
    g = Gallery(["b", "a", "c"], np.stack([e, e, e]))
    assert rank_of(e, "a", g) == 2
    with pytest.raises(ValueError):
        rank_of(e, "z", g)


def test_accuracy_examples(rng):
    g = _gallery(rng, 10, 10)
    queries = [(g.embeddings[i], g.ids[i]) for i in range(10)]
    assert accuracy_at_k(queries, g, 1) == 1.0
    assert accuracy_from_ranks([1, 3, 60], (1, 50)) == {1: 1 / 3, 50: 2 / 3}
    with pytest.raises(ValueError):
        accuracy_at_k(queries, g, 0)
    with pytest.raises(ValueError):
        accuracy_at_k([], g, 1)


def test_far_frr_examples():
    pairs = ScorePairs([0.9, 0.8, 0.3], [0.1, 0.5])
    assert far_frr(pairs, 0.5) == (0.5, 1 / 3)
    assert far_frr(pairs, 2.0) == (0.0, 1.0)


def test_eer_separable_and_overlapping():
    tau, eer = calibrate_eer(ScorePairs([0.8, 0.9], [0.1, 0.2]))
    assert eer == 0.0 and 0.2 < tau <= 0.8
    tau, eer = calibrate_eer(ScorePairs([0.1, 0.2], [0.8, 0.9]))
    assert eer == 1.0 or eer > 0.9
    with pytest.raises(ValueError):
        calibrate_eer(ScorePairs([], [0.1]))


@given(st.integers(0, 10_000))
def test_eer_matches_threshold_scan(seed):
    rng = np.random.default_rng(seed)
    pos = np.clip(rng.normal(0.6, 0.2, 2000), -1, 1)
    neg = np.clip(rng.normal(0.1, 0.2, 3000), -1, 1)
    _, eer = calibrate_eer(ScorePairs(pos, neg))
    _, ref = scan_eer(pos, neg)
    assert abs(eer - ref) < 1e-3


def test_match_rate(rng):
    g = _gallery(rng, 4, 2)
    assert match_rate([(g.embeddings[0], "p0")], g, 0.999) == 1.0
    assert match_rate([(-g.embeddings[0], "p0")], g, 0.5) == 0.0


def test_ssim_psnr_analytic():
    rng = np.random.default_rng(0)
    x = rng.random((32, 32, 3)) * 0.8
    assert ssim(x, x) == 1.0
    assert psnr(x, x) == math.inf
    assert math.isclose(psnr(x, x + 0.1), 20.0, rel_tol=0, abs_tol=1e-9)
    with pytest.raises(ValueError):
        ssim(x, x[:20])
    with pytest.raises(ValueError):
        ssim(x[:8, :8], x[:8, :8])


def test_ssim_matches_window_loop():
    rng = np.random.default_rng(1)
    x = rng.random((20, 24, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert math.isclose(ssim(x, y), loop_ssim(x, y), rel_tol=1e-10)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=50))
def test_histogram_counts_everything(vals):
    h = similarity_histogram(vals)
    assert len(h) == 20 and sum(h) == len(vals)


@pytest.fixture(scope="module")
def mini_protocol(embedder):
    dist = ViewpointDistribution((-0.3, 0.3), (-0.3, 0.3), default_frontal(32, 32))
    return build_synthetic_protocol(2, 3, 4, 0.05, embedder, dist, n_primitives=60)


def test_protocol_shapes_and_determinism(mini_protocol, embedder):
    g, pairs = mini_protocol
    assert len(g) == 12 and g.identities == ["id000", "id001", "id002"]
    assert pairs.positives.size == 3 * 6 and pairs.negatives.size == 66 - 18
    again = build_synthetic_protocol(2, 3, 4, 0.05, embedder, mini_protocol.dist, n_primitives=60)
    assert np.array_equal(again.gallery.embeddings, g.embeddings)
    assert identity_name(12) == "id012"
    with pytest.raises(ValueError):
        build_synthetic_protocol(2, 1, 4)


def test_grid_report_and_evaluation(mini_protocol, embedder):
    name = "id001"
    scene = mini_protocol.scenes[name]
    rep = rotation_grid_report(scene, scene, embedder, None, mini_protocol.dist, 3, 3, 0.5)
    assert rep.n_match + rep.n_no_match == 9
    assert rep.cells[4]["similarity"] == pytest.approx(1.0, abs=1e-12)
    assert rep.to_csv().count("\n") == 10 and "no_match=" in rep.to_text()
    views = [mini_protocol.dist.base_view]
    report = evaluate_scene(scene, scene, name, mini_protocol.gallery, embedder, 0.5, views)
    assert report.ssim == 1.0 and report.psnr == math.inf
    assert report.accuracy_at_k[1] == 1.0
    assert "Rank-50" in report.to_text()
