"""Frozen-feature probes: multi-view correspondence, depth regression, segmentation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Camera, project_points, unproject_pixels

log = logging.getLogger(__name__)

RATIO_TEST = 0.9


@dataclass(frozen=True)
class ProbeReport:
    task: str
    metric: str
    value: float
    num_samples: int
    seed: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.task}/{self.metric}: non-finite value")
        if self.num_samples <= 0:
            raise ValueError(f"{self.task}/{self.metric}: no samples")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------- #
#                           Correspondence                                    #
# --------------------------------------------------------------------------- #

@dataclass
class CorrespondenceResult:
    recall: float
    hits: int
    passed_ratio: int
    queries: int
    empty: bool = False


def _patch_centers(h: int, w: int, H: int, W: int) -> np.ndarray:
    p_r, p_c = H // h, W // w
    rows, cols = np.mgrid[0:h, 0:w]
    return np.stack([(cols.ravel() + 0.5) * p_c, (rows.ravel() + 0.5) * p_r], axis=1)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def correspondence(feats_a: np.ndarray, feats_b: np.ndarray, depth_a: np.ndarray, cam_a: Camera, cam_b: Camera,
                   threshold_px: float = 10.0, ratio: float = RATIO_TEST) -> CorrespondenceResult:
    """Cosine nearest-neighbor matching of A's patches in B, scored against depth reprojection.

    Queries are A's patches whose center pixel has valid depth and whose
    3D point projects inside B. A query is a hit when it passes the ratio
    test (``d1 < ratio * d2`` on cosine distance) and its match lies within
    ``threshold_px`` of the reprojected point.
    """
    if threshold_px <= 0:
        raise ValueError("threshold must be positive")
    h, w, C = feats_a.shape
    H, W = depth_a.shape[:2]
    centers = _patch_centers(h, w, H, W)
    ci = np.floor(centers[:, 1]).astype(int)
    cj = np.floor(centers[:, 0]).astype(int)
    d = np.asarray(depth_a).reshape(H, W)[ci, cj]
    valid = d > 0
    uv_b = np.full((centers.shape[0], 2), np.nan)
    if valid.any():
        pts = unproject_pixels(cam_a, centers[valid], d[valid])
        proj, _, ok = project_points(cam_b, pts)
        uv_b[valid] = proj
        valid[np.flatnonzero(valid)[~ok]] = False
    inside = valid & (uv_b[:, 0] >= 0) & (uv_b[:, 0] < cam_b.width) & (uv_b[:, 1] >= 0) & (uv_b[:, 1] < cam_b.height)
    q = np.flatnonzero(inside)
    if q.size == 0:
        return CorrespondenceResult(0.0, 0, 0, 0, empty=True)
    fa = _unit(feats_a.reshape(-1, C)[q])
    fb = _unit(feats_b.reshape(-1, C))
    dist = 1.0 - fa @ fb.T
    order = np.argsort(dist, axis=1, kind="stable")
    best = order[:, 0]
    d1 = dist[np.arange(q.size), best]
    if fb.shape[0] > 1:
        d2 = dist[np.arange(q.size), order[:, 1]]
        passed = d1 < ratio * d2
    else:
        passed = np.ones(q.size, dtype=bool)
    hb, wb = feats_b.shape[:2]
    centers_b = _patch_centers(hb, wb, cam_b.height, cam_b.width)
    err = np.linalg.norm(centers_b[best] - uv_b[q], axis=1)
    hits = passed & (err <= threshold_px)
    return CorrespondenceResult(float(hits.sum() / q.size), int(hits.sum()), int(passed.sum()), int(q.size))


def correspondence_recall(feats_a, feats_b, depth_a, cam_a, cam_b, threshold_px: float = 10.0) -> float:
    """Fraction of valid query patches in A matched correctly in B."""
    res = correspondence(feats_a, feats_b, depth_a, cam_a, cam_b, threshold_px)
    if res.empty:
        log.warning("no valid correspondence queries; reporting recall 0")
    return res.recall


def relative_view_angle(cam_a: Camera, cam_b: Camera) -> float:
    """Angle in degrees between the two cameras' viewing directions."""
    za, zb = cam_a.rotation[2], cam_b.rotation[2]
    return float(np.degrees(np.arccos(np.clip(za @ zb, -1.0, 1.0))))


# --------------------------------------------------------------------------- #
#                               Depth                                         #
# --------------------------------------------------------------------------- #

def patch_depth_targets(depth: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean foreground depth per patch and a validity flag (any foreground pixel)."""
    H, W = depth.shape[:2]
    d = np.asarray(depth).reshape(h, H // h, w, W // w).transpose(0, 2, 1, 3).reshape(h * w, -1)
    fg = d > 0
    cnt = fg.sum(axis=1)
    mean = np.divide((d * fg).sum(axis=1), cnt, out=np.zeros(h * w), where=cnt > 0)
    return mean, cnt > 0


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float):
    """Ridge regression with an unpenalized intercept; returns ``(weights, intercept)``."""
    if not lam > 0:
        raise ValueError("ridge lambda must be positive")
    mx, my = X.mean(axis=0), y.mean()
    Xc = X - mx
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    wts = Vt.T @ ((s / (s * s + lam)) * (U.T @ (y - my)))
    return wts, my - mx @ wts


def depth_probe(train_feats, train_depths, test_feats, test_depths, ridge_lambda: float = 1e-3):
    """Closed-form ridge probe from patch features to patch depth; returns ``(rmse, absrel)``."""
    Xtr, ytr = np.asarray(train_feats, float), np.asarray(train_depths, float)
    Xte, yte = np.asarray(test_feats, float), np.asarray(test_depths, float)
    w, b = ridge_fit(Xtr, ytr, ridge_lambda)
    pred = Xte @ w + b
    rmse = float(np.sqrt(np.mean((pred - yte) ** 2)))
    absrel = float(np.mean(np.abs(pred - yte) / yte))
    return rmse, absrel


# --------------------------------------------------------------------------- #
#                           Segmentation                                      #
# --------------------------------------------------------------------------- #

def patch_majority_labels(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = mask.shape
    m = np.asarray(mask).reshape(h, H // h, w, W // w).transpose(0, 2, 1, 3).reshape(h * w, -1)
    out = np.empty(h * w, dtype=np.int64)
    for k in range(h * w):
        vals, cnt = np.unique(m[k], return_counts=True)
        out[k] = vals[np.argmax(cnt)]  # ties go to the smaller label
    return out


def fit_logistic(X: np.ndarray, y: np.ndarray, classes: np.ndarray, l2_reg: float,
                 tol: float = 1e-6, max_iter: int = 5000):
    """Multinomial logistic regression by full-batch (Nesterov-accelerated) gradient descent.

    Features are standardized with the training statistics; the returned
    predictor applies the same transform.
    """
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = np.hstack([(X - mu) / sd, np.ones((X.shape[0], 1))])
    n, d = Z.shape
    K = classes.size
    Y = (y[:, None] == classes[None, :]).astype(np.float64)
    # softmax-CE Hessian is bounded by 0.5 * Z^T Z / n
    L = 0.5 * np.linalg.norm(Z, 2) ** 2 / n + l2_reg
    W = np.zeros((d, K))
    V = W.copy()
    t = 1.0
    reg = np.ones((d, 1))
    reg[-1] = 0.0
    for _ in range(max_iter):
        logits = Z @ V
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        G = Z.T @ (P - Y) / n + l2_reg * reg * V
        W_new = V - G / L
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        V = W_new + ((t - 1) / t_new) * (W_new - W)
        W, t = W_new, t_new
        if np.linalg.norm(G) < tol:
            break

    def predict(Xq: np.ndarray) -> np.ndarray:
        Zq = np.hstack([(Xq - mu) / sd, np.ones((Xq.shape[0], 1))])
        return classes[np.argmax(Zq @ W, axis=1)]

    return predict


def segmentation_probe(train_feats, train_labels, test_feats, test_labels, l2_reg: float = 1e-3):
    """Linear classifier on frozen patch features; returns ``(accuracy, mIoU)``.

    mIoU averages over classes present in the test labels that were also
    seen in training.
    """
    Xtr, ytr = np.asarray(train_feats, float), np.asarray(train_labels)
    Xte, yte = np.asarray(test_feats, float), np.asarray(test_labels)
    classes = np.unique(ytr)
    if classes.size == 1:
        pred = np.full(yte.shape, classes[0])
    else:
        pred = fit_logistic(Xtr, ytr, classes, l2_reg)(Xte)
    acc = float(np.mean(pred == yte))
    ious = []
    for c in np.unique(yte):
        if c not in classes:
            log.info("class %d absent from probe training data; excluded from mIoU", c)
            continue
        inter = np.sum((pred == c) & (yte == c))
        union = np.sum((pred == c) | (yte == c))
        ious.append(inter / union)
    miou = float(np.mean(ious)) if ious else 0.0
    return acc, miou
