import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat_distill.geometry import Camera, look_at
from splat_distill.metrics import (
    ProbeReport, correspondence, correspondence_recall, depth_probe, patch_depth_targets, patch_majority_labels,
    relative_view_angle, ridge_fit, segmentation_probe,
)


def setup_pair(rng):
    cam = Camera.from_fov(60, 64, 64, look_at([0, -3, 1], [0, 0, 1]))
    depth = rng.uniform(2.0, 4.0, (64, 64, 1))
    feats = rng.normal(size=(8, 8, 16))
    return cam, depth, feats


def test_identical_views_recall_one():
    cam, depth, feats = setup_pair(np.random.default_rng(0))
    assert correspondence_recall(feats, feats, depth, cam, cam, 10.0) == 1.0


def test_shuffled_features_near_chance():
    rng = np.random.default_rng(1)
    cam, depth, feats = setup_pair(rng)
    recalls = []
    for _ in range(100):
        perm = rng.permutation(64)
        shuffled = feats.reshape(64, -1)[perm].reshape(feats.shape)
        recalls.append(correspondence_recall(feats, shuffled, depth, cam, cam, 10.0))
    assert np.mean(recalls) < 0.1


def test_infinite_threshold_is_ratio_pass_rate():
    rng = np.random.default_rng(2)
    cam, depth, feats = setup_pair(rng)
    cam_b = Camera.from_fov(60, 64, 64, look_at([0.4, -3, 1], [0, 0, 1]))
    other = feats + 0.8 * rng.normal(size=feats.shape)
    res = correspondence(feats, other, depth, cam, cam_b, 1e9)
    assert res.queries > 0
    assert res.recall == res.passed_ratio / res.queries


def test_empty_queries_flagged():
    cam, _, feats = setup_pair(np.random.default_rng(3))
    res = correspondence(feats, feats, np.zeros((64, 64, 1)), cam, cam)
    assert res.empty and res.recall == 0.0
    with pytest.raises(ValueError):
        correspondence(feats, feats, np.zeros((64, 64, 1)), cam, cam, 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_recall_orthogonal_invariance(seed):
    rng = np.random.default_rng(seed)
    cam, depth, feats = setup_pair(rng)
    cam_b = Camera.from_fov(60, 64, 64, look_at([0.5, -3, 1.1], [0, 0, 1]))
    other = feats + 0.5 * rng.normal(size=feats.shape)
    Q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
    base = correspondence(feats, other, depth, cam, cam_b)
    rot = correspondence(feats @ Q, other @ Q, depth, cam, cam_b)
    assert (base.hits, base.queries) == (rot.hits, rot.queries)


def test_relative_view_angle():
    a = Camera.from_fov(60, 64, 64, look_at([0, -3, 0], [0, 0, 0]))
    b = Camera.from_fov(60, 64, 64, look_at([3, 0, 0], [0, 0, 0]))
    assert relative_view_angle(a, b) == pytest.approx(90.0, abs=1e-9)


def test_patch_targets():
    depth = np.zeros((4, 4))
    depth[0, 0], depth[0, 1] = 2.0, 4.0
    d, ok = patch_depth_targets(depth, 2, 2)
    assert ok.tolist() == [True, False, False, False]
    assert d[0] == 3.0
    mask = np.array([[1, 1, 2, 2], [3, 1, 2, 5], [0, 0, 4, 4], [0, 6, 4, 7]])
    assert patch_majority_labels(mask, 2, 2).tolist() == [1, 2, 0, 4]


def test_depth_probe_realizable():
    rng = np.random.default_rng(4)
    d_tr, d_te = rng.uniform(1, 5, 200), rng.uniform(1, 5, 80)
    X_tr, X_te = np.repeat(d_tr[:, None], 4, 1), np.repeat(d_te[:, None], 4, 1)
    rmse, absrel = depth_probe(X_tr, d_tr, X_te, d_te, 1e-12)
    assert rmse < 1e-6 and absrel < 1e-6


def test_depth_probe_constant_features():
    rng = np.random.default_rng(5)
    d_tr, d_te = rng.uniform(1, 5, 200), rng.uniform(1, 5, 80)
    rmse, _ = depth_probe(np.ones((200, 3)), d_tr, np.ones((80, 3)), d_te, 1e-3)
    expected = np.sqrt(np.mean((d_te - d_tr.mean()) ** 2))
    assert rmse == pytest.approx(expected, abs=1e-12)
    # equals the test std when train and test share a mean
    rmse, _ = depth_probe(np.ones((80, 3)), d_te, np.ones((80, 3)), d_te, 1e-3)
    assert rmse == pytest.approx(d_te.std(), abs=1e-12)


def test_ridge_huge_lambda_predicts_train_mean():
    rng = np.random.default_rng(6)
    X, y = rng.normal(size=(100, 5)), rng.normal(size=100)
    w, b = ridge_fit(X, y, 1e12)
    np.testing.assert_allclose(X @ w + b, y.mean(), atol=1e-9)
    with pytest.raises(ValueError):
        ridge_fit(X, y, 0.0)


def test_ridge_matches_normal_equations():
    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(50, 6)), rng.normal(size=50)
    lam = 0.3
    w, b = ridge_fit(X, y, lam)
    Xc, yc = X - X.mean(0), y - y.mean()
    w_ref = np.linalg.solve(Xc.T @ Xc + lam * np.eye(6), Xc.T @ yc)
    np.testing.assert_allclose(w, w_ref, atol=1e-12)
    assert b == pytest.approx(y.mean() - X.mean(0) @ w_ref, abs=1e-12)


def test_depth_probe_linear_reparametrization():
    rng = np.random.default_rng(8)
    X_tr, X_te = rng.normal(size=(300, 8)), rng.normal(size=(100, 8))
    wt = rng.normal(size=8)
    d_tr = X_tr @ wt + 3 + 0.3 * rng.normal(size=300)
    d_te = X_te @ wt + 3 + 0.3 * rng.normal(size=100)
    A = rng.normal(size=(8, 8)) + 3 * np.eye(8)
    r1, _ = depth_probe(X_tr, d_tr, X_te, d_te, 1e-12)
    r2, _ = depth_probe(X_tr @ A, d_tr, X_te @ A, d_te, 1e-12)
    assert abs(r1 - r2) < 1e-6


def test_segmentation_separable():
    rng = np.random.default_rng(9)
    y_tr, y_te = rng.integers(0, 4, 200), rng.integers(0, 4, 60)
    X_tr, X_te = np.eye(4)[y_tr], np.eye(4)[y_te]
    acc, miou = segmentation_probe(X_tr, y_tr, X_te, y_te, 1e-4)
    assert acc == 1.0 and miou == 1.0


def test_segmentation_single_class():
    rng = np.random.default_rng(10)
    acc, miou = segmentation_probe(rng.normal(size=(30, 3)), np.full(30, 2), rng.normal(size=(10, 3)), np.full(10, 2))
    assert acc == 1.0 and miou == 1.0


def test_segmentation_shuffled_labels_near_majority():
    rng = np.random.default_rng(11)
    y = rng.choice([0, 1, 2], size=400, p=[0.6, 0.3, 0.1])
    X = rng.normal(size=(400, 4))
    accs = []
    for _ in range(20):
        ys = rng.permutation(y)
        accs.append(segmentation_probe(X[:300], ys[:300], X[300:], ys[300:], 1e-1)[0])
    majority = np.max(np.bincount(y[300:])) / 100
    assert abs(np.mean(accs) - majority) < 0.08


def test_segmentation_unseen_class_excluded():
    X_tr = np.eye(2)[np.array([0, 1] * 10)]
    y_tr = np.array([0, 1] * 10)
    X_te = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    y_te = np.array([0, 1, 5])
    acc, miou = segmentation_probe(X_tr, y_tr, X_te, y_te, 1e-4)
    assert acc == pytest.approx(2 / 3)
    assert miou == pytest.approx(0.75)


def test_probe_report():
    r = ProbeReport("depth", "rmse", 0.5, 10, 0)
    assert json.loads(r.to_json()) == {"task": "depth", "metric": "rmse", "value": 0.5, "num_samples": 10, "seed": 0}
    with pytest.raises(ValueError):
        ProbeReport("depth", "rmse", float("nan"), 10, 0)
    with pytest.raises(ValueError):
        ProbeReport("depth", "rmse", 0.5, 0, 0)
