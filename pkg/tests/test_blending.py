import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat_distill.blending import region_means, semantic_blend


def naive_blend(F, mask, alpha):
    H, W, _ = F.shape
    out = np.empty_like(F)
    for i in range(H):
        for j in range(W):
            acc = np.zeros(F.shape[-1])
            n = 0
            for a in range(H):
                for b in range(W):
                    if mask[a, b] == mask[i, j]:
                        acc += F[a, b]
                        n += 1
            out[i, j] = alpha * F[i, j] + (1 - alpha) * acc / n
    return out


def test_identity_at_alpha_one():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(8, 8, 3))
    mask = rng.integers(0, 3, (8, 8))
    np.testing.assert_array_equal(semantic_blend(F, mask, 1.0), F)


def test_two_pixel_region():
    F = np.array([[[1.0, 0.0], [0.0, 4.0]]])
    out = semantic_blend(F, np.zeros((1, 2), dtype=np.int64), 0.5)
    np.testing.assert_allclose(out[0, 0], 0.75 * F[0, 0] + 0.25 * F[0, 1], atol=1e-15)


def test_matches_naive_oracle():
    rng = np.random.default_rng(1)
    F = rng.normal(size=(32, 32, 4))
    mask = rng.integers(0, 3, (32, 32))
    np.testing.assert_allclose(semantic_blend(F, mask, 0.3), naive_blend(F, mask, 0.3), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 1.0))
def test_mean_preserved_and_variance_contracts(seed, alpha):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(16, 16, 3)) * rng.uniform(0.1, 5)
    mask = rng.integers(0, 5, (16, 16))
    out = semantic_blend(F, mask, alpha)
    for l in np.unique(mask):
        sel = mask == l
        np.testing.assert_allclose(out[sel].mean(0), F[sel].mean(0), atol=1e-12)
        np.testing.assert_allclose(out[sel].var(0), alpha ** 2 * F[sel].var(0), rtol=1e-9, atol=1e-12)


def test_alpha_zero_is_region_mean():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(8, 8, 2))
    mask = rng.integers(0, 2, (8, 8))
    np.testing.assert_allclose(semantic_blend(F, mask, 0.0), region_means(F, mask), atol=1e-15)


def test_weighted_region_mean():
    F = np.array([[[1.0], [3.0], [10.0]]])
    mask = np.array([[0, 0, 1]])
    w = np.array([[3.0, 1.0, 0.0]])
    means = region_means(F, mask, w)
    np.testing.assert_allclose(means[0, :, 0], [1.5, 1.5, 10.0])


def test_rejects_bad_inputs():
    F = np.zeros((4, 4, 2))
    with pytest.raises(ValueError):
        semantic_blend(F, np.zeros((4, 4), dtype=np.int64), 1.5)
    with pytest.raises(ValueError):
        semantic_blend(F, np.zeros((3, 4), dtype=np.int64), 0.5)
