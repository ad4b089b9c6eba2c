import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat_distill.geometry import Camera, Pose, bilinear_resize, look_at, project_point
from splat_distill.lifting import (
    ContextView, attach_features, label_weights, lift_geometry, low_res_labels, mask_aware_upscale,
)


def scalar_upscale(low, mask):
    """Per-pixel loop implementation of label-restricted bilinear upscaling (test oracle)."""
    h, w, C = low.shape
    H, W = mask.shape
    s = H // h
    lab = np.array([[mask[a * s + s // 2, b * s + s // 2] for b in range(w)] for a in range(h)])
    out = np.zeros((H, W, C))
    fallback = []
    for i in range(H):
        y = min(max((i + 0.5) / s - 0.5, 0.0), h - 1)
        y0 = int(np.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(W):
            x = min(max((j + 0.5) / s - 0.5, 0.0), w - 1)
            x0 = int(np.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            taps = [((y0, x0), (1 - fy) * (1 - fx)), ((y0, x1), (1 - fy) * fx),
                    ((y1, x0), fy * (1 - fx)), ((y1, x1), fy * fx)]
            tot = sum(wt for (a, b), wt in taps if lab[a, b] == mask[i, j])
            if tot <= 0:
                fallback.append((i, j))
                continue
            for (a, b), wt in taps:
                if lab[a, b] == mask[i, j]:
                    out[i, j] += wt / tot * low[a, b]
    return out, fallback


def two_label_mask(H, W, rng):
    m = np.zeros((H, W), dtype=np.int64)
    cy, cx, r = rng.uniform(0, H), rng.uniform(0, W), rng.uniform(H / 6, H / 2)
    yy, xx = np.mgrid[0:H, 0:W]
    m[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 3
    m[: H // 4, : W // 3] = 7
    return m


def test_label_weights_hand_example():
    tilde = np.array([0.6, 0.2, 0.1, 0.1])
    same = np.array([True, False, True, False])
    w, ok = label_weights(tilde, same)
    assert ok
    np.testing.assert_allclose(w, [6 / 7, 0, 1 / 7, 0], atol=1e-15)


def test_label_weights_no_match():
    w, ok = label_weights(np.array([0.25] * 4), np.zeros(4, dtype=bool))
    assert not ok
    np.testing.assert_array_equal(w, 0)


def test_uniform_mask_equals_bilinear():
    rng = np.random.default_rng(0)
    low = rng.normal(size=(8, 8, 5))
    mask = np.full((64, 64), 4, dtype=np.int64)
    np.testing.assert_allclose(mask_aware_upscale(low, mask), bilinear_resize(low, 64, 64), atol=1e-12)


def test_grid_point_copies_feature():
    rng = np.random.default_rng(1)
    low = rng.normal(size=(4, 4, 3))
    mask = two_label_mask(12, 12, rng)
    out = mask_aware_upscale(low, mask)
    # s = 3: pixel 3a+1 maps exactly onto low-res point a
    lab = low_res_labels(mask, 4, 4)
    for a in range(4):
        for b in range(4):
            if mask[3 * a + 1, 3 * b + 1] == lab[a, b]:
                np.testing.assert_array_equal(out[3 * a + 1, 3 * b + 1], low[a, b])


def test_scale_one_is_identity():
    rng = np.random.default_rng(2)
    low = rng.normal(size=(6, 6, 2))
    mask = rng.integers(0, 3, (6, 6))
    np.testing.assert_array_equal(mask_aware_upscale(low, mask), low)


def test_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        low = rng.normal(size=(6, 6, 4))
        mask = two_label_mask(48, 48, rng)
        fast = mask_aware_upscale(low, mask)
        slow, fallback = scalar_upscale(low, mask)
        keep = np.ones(mask.shape, dtype=bool)
        for i, j in fallback:
            keep[i, j] = False
        np.testing.assert_allclose(fast[keep], slow[keep], atol=1e-12)


def test_partition_of_unity_and_purity():
    rng = np.random.default_rng(4)
    mask = two_label_mask(64, 64, rng)
    labels = np.unique(mask)
    lab = low_res_labels(mask, 8, 8)
    onehot = (lab[..., None] == labels).astype(float)
    out = mask_aware_upscale(onehot, mask)
    _, fallback = scalar_upscale(onehot, mask)
    fb = np.zeros(mask.shape, dtype=bool)
    for i, j in fallback:
        fb[i, j] = True
    np.testing.assert_allclose(out[~fb].sum(axis=-1), 1.0, atol=1e-9)
    for k, l in enumerate(labels):
        sel = (mask == l) & ~fb
        np.testing.assert_array_equal(out[sel][:, np.arange(len(labels)) != k], 0.0)


def test_fallback_copies_nearest_same_label():
    low = np.arange(16, dtype=float).reshape(4, 4, 1)
    mask = np.zeros((32, 32), dtype=np.int64)
    # thin sliver of label 5 that no low-res center samples, plus one sampled pixel far away
    mask[10:12, 10:12] = 5
    mask[3 * 8 + 4, 0 * 8 + 4] = 5
    out = mask_aware_upscale(low, mask)
    assert out[10, 10, 0] == low[3, 0, 0]


def test_fallback_without_match_is_bilinear():
    low = np.arange(16, dtype=float).reshape(4, 4, 1)
    mask = np.zeros((32, 32), dtype=np.int64)
    mask[10, 10] = 9
    out = mask_aware_upscale(low, mask)
    np.testing.assert_allclose(out[10, 10], bilinear_resize(low, 32, 32)[10, 10], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_label_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    low = rng.normal(size=(8, 8, 3))
    mask = rng.integers(0, 4, (8, 8)).repeat(8, 0).repeat(8, 1)
    mask[rng.random((64, 64)) < 0.1] = 4
    perm = rng.permutation(np.arange(10, 15))
    relabeled = perm[mask]
    np.testing.assert_array_equal(mask_aware_upscale(low, mask), mask_aware_upscale(low, relabeled))


def test_rejects_non_integer_scale():
    with pytest.raises(ValueError):
        mask_aware_upscale(np.zeros((3, 3, 1)), np.zeros((10, 10), dtype=np.int64))


def view(cam, depth, mask=None):
    H, W = cam.height, cam.width
    return ContextView(np.zeros((H, W, 3)), cam, depth.reshape(H, W, 1),
                       np.zeros((H, W), dtype=np.int64) if mask is None else mask)


def test_lift_counts_all_foreground():
    cam = Camera.from_fov(60, 64, 64)
    views = [view(cam, np.full((64, 64), 2.0)), view(cam, np.full((64, 64), 3.0))]
    cloud, src = lift_geometry(views, 1)
    assert len(cloud) == 8192
    assert src.shape == (8192, 3)
    cloud, _ = lift_geometry(views, 4)
    assert len(cloud) == 2 * 16 * 16


def test_lift_center_pixel_on_axis():
    cam = Camera(10, 10, 0.5, 0.5, 1, 1)
    cloud, src = lift_geometry([view(cam, np.full((1, 1), 2.0))], 1)
    np.testing.assert_allclose(cloud.means[0], [0, 0, 2], atol=1e-15)
    np.testing.assert_allclose(cloud.scales[0], [0.2] * 3)
    assert cloud.opacities[0] == 0.8


def test_lift_skips_background_and_copies_labels():
    cam = Camera.from_fov(60, 8, 8)
    depth = np.full((8, 8), 1.5)
    depth[:2] = 0
    mask = np.arange(64).reshape(8, 8)
    cloud, src = lift_geometry([view(cam, depth, mask)], 1)
    assert len(cloud) == 48
    np.testing.assert_array_equal(cloud.labels, mask[src[:, 1], src[:, 2]])


def test_lift_means_reproject_to_source():
    rng = np.random.default_rng(5)
    cam = Camera(55, 57, 31, 33, 64, 64, look_at([1, 2, 1.5], [0, 0, 0.3]))
    depth = rng.uniform(0.5, 5, (64, 64))
    cloud, src = lift_geometry([view(cam, depth)], 1)
    for k in rng.choice(len(cloud), 300, replace=False):
        uv, z = project_point(cam, cloud.means[k])
        _, i, j = src[k]
        np.testing.assert_allclose(uv, [j + 0.5, i + 0.5], atol=1e-9 * 64)
        assert abs(z - depth[i, j]) <= 1e-9 * depth[i, j]


def test_lift_planar_wall_is_coplanar():
    # camera looking at a wall x = 2 from the origin; analytic depth per pixel
    cam = Camera(40, 40, 32, 32, 64, 64, look_at([0, 0, 1], [2, 0.3, 1.2]))
    ys, xs = np.mgrid[0:64, 0:64] + 0.5
    rays_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], -1)
    rays_world = rays_cam @ cam.rotation
    depth = (2.0 - cam.center[0]) / rays_world[..., 0]
    cloud, _ = lift_geometry([view(cam, depth)], 1)
    centroid = cloud.means.mean(axis=0)
    _, _, vt = np.linalg.svd(cloud.means - centroid)
    residual = np.abs((cloud.means - centroid) @ vt[-1])
    assert residual.max() < 1e-6


def test_lift_rejects_bad_stride_and_empty():
    cam = Camera.from_fov(60, 6, 6)
    with pytest.raises(ValueError):
        lift_geometry([view(cam, np.ones((6, 6)))], 4)
    with pytest.raises(ValueError):
        lift_geometry([], 1)
    cloud, _ = lift_geometry([view(cam, np.zeros((6, 6)))], 1)
    assert len(cloud) == 0


def test_attach_constant_and_lookup():
    cam = Camera.from_fov(60, 16, 16)
    cloud, src = lift_geometry([view(cam, np.full((16, 16), 2.0))], 1)
    const = np.full((16, 16, 4), 1.25)
    scene = attach_features(cloud, src, [const])
    np.testing.assert_array_equal(scene.gaussians.features, 1.25)

    rng = np.random.default_rng(6)
    fmap = rng.normal(size=(16, 16, 4))
    scene = attach_features(cloud, src, [fmap])
    k = np.flatnonzero((src[:, 1] == 3) & (src[:, 2] == 5))[0]
    np.testing.assert_array_equal(scene.gaussians.features[k], fmap[3, 5])
    # exhaustive read-back reproduces the map
    back = np.zeros_like(fmap)
    back[src[:, 1], src[:, 2]] = scene.gaussians.features
    np.testing.assert_array_equal(back, fmap)
    np.testing.assert_array_equal(scene.gaussians.means, cloud.means)


def test_attach_out_of_bounds_fails():
    cam = Camera.from_fov(60, 4, 4)
    cloud, src = lift_geometry([view(cam, np.ones((4, 4)))], 1)
    bad = src.copy()
    bad[0, 1] = 9
    with pytest.raises(IndexError):
        attach_features(cloud, bad, [np.zeros((4, 4, 2))])
    bad = src.copy()
    bad[0, 0] = 1
    with pytest.raises(IndexError):
        attach_features(cloud, bad, [np.zeros((4, 4, 2))])
