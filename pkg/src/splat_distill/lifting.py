"""Lift context-view features onto a 3D Gaussian scaffold.

Geometry comes from per-pixel depth (one Gaussian per sampled
foreground pixel). Low-resolution teacher features are brought to pixel
resolution with a label-aware bilinear filter and then attached to the
Gaussian born at each pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (Camera, GaussianCloud, bilinear_resize, bilinear_taps, check_feature_map, check_mask,
                       unproject_pixels)

PIXEL_FOOTPRINT_FACTOR = 1.0
DEFAULT_OPACITY = 0.8
FALLBACK_RADIUS = 4


@dataclass
class ContextView:
    image: np.ndarray  # (H, W, 3)
    camera: Camera
    depth: np.ndarray  # (H, W, 1), 0 marks background
    mask: np.ndarray  # (H, W) int

    def __post_init__(self):
        H, W = self.camera.height, self.camera.width
        self.image = check_feature_map(self.image, 3)
        self.depth = check_feature_map(np.asarray(self.depth).reshape(H, W, 1), 1)
        self.mask = check_mask(self.mask, (H, W))
        if self.image.shape[:2] != (H, W):
            raise ValueError("image size does not match camera")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")


@dataclass
class FeatureScene:
    gaussians: GaussianCloud
    source: np.ndarray  # (N, 3) rows of (view index, row, col)

    def __len__(self):
        return len(self.gaussians)


def lift_geometry(views: list[ContextView], stride: int = 1, *,
                  footprint: float = PIXEL_FOOTPRINT_FACTOR,
                  opacity: float = DEFAULT_OPACITY) -> tuple[GaussianCloud, np.ndarray]:
    """One isotropic Gaussian per sampled foreground pixel of every view.

    Returns the cloud (features zeroed, one channel wide) and the
    ``(view, row, col)`` source record for each Gaussian.
    """
    if not views:
        raise ValueError("need at least one context view")
    clouds, sources = [], []
    for v, view in enumerate(views):
        cam = view.camera
        if cam.height % stride or cam.width % stride:
            raise ValueError(f"stride {stride} does not divide {cam.height}x{cam.width}")
        rows, cols = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
        rows, cols = rows.ravel(), cols.ravel()
        d = view.depth[rows, cols, 0]
        fg = d > 0
        rows, cols, d = rows[fg], cols[fg], d[fg]
        uv = np.stack([cols + 0.5, rows + 0.5], axis=1)
        means = unproject_pixels(cam, uv, d) if d.size else np.zeros((0, 3))
        sigma = footprint * d / cam.fx
        n = d.size
        clouds.append(GaussianCloud(
            means,
            np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            np.repeat(sigma[:, None], 3, axis=1),
            np.full(n, opacity),
            np.zeros((n, 1)),
            view.mask[rows, cols],
        ))
        sources.append(np.stack([np.full(n, v), rows, cols], axis=1))
    return GaussianCloud.concat(clouds), np.concatenate(sources).astype(np.int64)


def low_res_labels(mask_high: np.ndarray, h: int, w: int) -> np.ndarray:
    """Label of each low-res point, read at its high-res center pixel."""
    s = mask_high.shape[0] // h
    return mask_high[np.arange(h) * s + s // 2][:, np.arange(w) * s + s // 2]


def bilinear_upscale(low: np.ndarray, H: int, W: int) -> np.ndarray:
    """Label-agnostic counterpart of :func:`mask_aware_upscale`."""
    return bilinear_resize(low, H, W)


def label_weights(tilde: np.ndarray, same: np.ndarray):
    """Renormalize bilinear weights over the neighbors that share the query label.

    ``tilde`` and ``same`` are stacked along axis 0 (one slice per
    neighbor). Returns ``(weights, ok)`` where ``ok`` is false wherever
    no matching neighbor carries weight; those weights are all zero.
    """
    kept = np.where(same, tilde, 0.0)
    total = kept.sum(axis=0)
    ok = total > 0
    return np.divide(kept, total, out=np.zeros_like(kept), where=ok), ok


def mask_aware_upscale(low: np.ndarray, mask_high: np.ndarray) -> np.ndarray:
    """Upscale ``(h, w, C)`` features to the mask resolution without mixing labels.

    Each output pixel is a bilinear blend of its four low-res neighbors,
    restricted to the neighbors whose label matches the pixel's label and
    renormalized. Pixels with no matching neighbor copy the nearest
    matching low-res point within a Chebyshev radius of 4, or fall back to
    plain bilinear if there is none.
    """
    low = check_feature_map(low)
    mask_high = check_mask(mask_high)
    h, w, C = low.shape
    H, W = mask_high.shape
    if H % h or W % w or H // h != W // w:
        raise ValueError(f"mask {H}x{W} is not an integer upscale of {h}x{w}")
    lab_low = low_res_labels(mask_high, h, w)

    r0, r1, wr = bilinear_taps(H, h)
    c0, c1, wc = bilinear_taps(W, w)
    R = [r0[:, None], r0[:, None], r1[:, None], r1[:, None]]
    Cc = [c0[None, :], c1[None, :], c0[None, :], c1[None, :]]
    wr2, wc2 = wr[:, None], wc[None, :]
    tilde = [(1 - wr2) * (1 - wc2), (1 - wr2) * wc2, wr2 * (1 - wc2), wr2 * wc2]

    same = np.stack([lab_low[r, c] == mask_high for r, c in zip(R, Cc)])
    weights, ok = label_weights(np.stack([np.broadcast_to(t, (H, W)) for t in tilde]), same)
    out = np.zeros((H, W, C))
    for k in range(4):
        out += weights[k][..., None] * low[np.broadcast_to(R[k], (H, W)), np.broadcast_to(Cc[k], (H, W))]

    if not ok.all():
        bil = None
        pos_r = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
        pos_c = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
        for i, j in zip(*np.nonzero(~ok)):
            src = _nearest_same_label(lab_low, mask_high[i, j], pos_r[i], pos_c[j])
            if src is not None:
                out[i, j] = low[src]
            else:
                if bil is None:
                    bil = bilinear_upscale(low, H, W)
                out[i, j] = bil[i, j]
    return out


def _nearest_same_label(lab_low: np.ndarray, label: int, y: float, x: float):
    h, w = lab_low.shape
    ci, cj = int(np.floor(y + 0.5)), int(np.floor(x + 0.5))
    for radius in range(FALLBACK_RADIUS + 1):
        best, best_d = None, np.inf
        for a in range(ci - radius, ci + radius + 1):
            for b in range(cj - radius, cj + radius + 1):
                if max(abs(a - ci), abs(b - cj)) != radius or not (0 <= a < h and 0 <= b < w):
                    continue
                if lab_low[a, b] != label:
                    continue
                d = (a - y) ** 2 + (b - x) ** 2
                if d < best_d:  # strict: first hit in row-major order wins ties
                    best, best_d = (a, b), d
        if best is not None:
            return best
    return None


def attach_features(gaussians: GaussianCloud, source: np.ndarray, high_maps: list[np.ndarray]) -> FeatureScene:
    """Give every Gaussian the high-res feature of the pixel it was lifted from."""
    source = np.asarray(source, dtype=np.int64).reshape(-1, 3)
    if source.shape[0] != len(gaussians):
        raise ValueError("one source record per Gaussian required")
    if len(gaussians) == 0:
        C = high_maps[0].shape[2] if high_maps else 0
        return FeatureScene(gaussians.with_features(np.zeros((0, C))), source)
    if source[:, 0].min() < 0 or source[:, 0].max() >= len(high_maps):
        raise IndexError("source view index out of range")
    C = high_maps[0].shape[2]
    feats = np.empty((len(gaussians), C))
    for v, fmap in enumerate(high_maps):
        sel = source[:, 0] == v
        if not sel.any():
            continue
        rows, cols = source[sel, 1], source[sel, 2]
        if fmap.shape[2] != C:
            raise ValueError("all high-res maps need the same channel count")
        if rows.min() < 0 or cols.min() < 0 or rows.max() >= fmap.shape[0] or cols.max() >= fmap.shape[1]:
            raise IndexError(f"source pixel out of bounds for view {v}")
        feats[sel] = fmap[rows, cols]
    return FeatureScene(gaussians.with_features(feats), source)
