"""Pull rendered features toward their mask-region mean."""

from __future__ import annotations

import numpy as np

from .geometry import check_feature_map, check_mask

DEFAULT_ALPHA = 0.5


def region_means(features: np.ndarray, mask: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel mean feature of the pixel's label region, ``(H, W, C)``.

    With ``weights`` (e.g. rendered alpha) the mean is weighted; a region
    whose weights sum to zero falls back to the plain mean.
    """
    H, W, C = features.shape
    flat = features.reshape(-1, C)
    _, inv = np.unique(mask.ravel(), return_inverse=True)
    inv = inv.ravel()
    n_lab = inv.max() + 1
    counts = np.bincount(inv, minlength=n_lab).astype(np.float64)
    sums = np.zeros((n_lab, C))
    np.add.at(sums, inv, flat)
    means = sums / counts[:, None]
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        wsum = np.bincount(inv, weights=w, minlength=n_lab)
        wsums = np.zeros((n_lab, C))
        np.add.at(wsums, inv, flat * w[:, None])
        good = wsum > 0
        means[good] = wsums[good] / wsum[good, None]
    return means[inv].reshape(H, W, C)


def semantic_blend(rendered: np.ndarray, mask: np.ndarray, alpha_blend: float = DEFAULT_ALPHA,
                   rendered_alpha: np.ndarray | None = None) -> np.ndarray:
    """``alpha * F(u) + (1 - alpha) * mean of F over the region sharing u's label``.

    Passing ``rendered_alpha`` weights the region mean by accumulated
    opacity instead of counting every pixel equally.
    """
    rendered = check_feature_map(rendered)
    mask = check_mask(mask, rendered.shape[:2])
    if not 0.0 <= alpha_blend <= 1.0:
        raise ValueError("alpha_blend must lie in [0, 1]")
    if alpha_blend == 1.0:
        return rendered.copy()
    means = region_means(rendered, mask, rendered_alpha)
    return alpha_blend * rendered + (1.0 - alpha_blend) * means
