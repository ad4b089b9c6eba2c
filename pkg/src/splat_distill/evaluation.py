"""Run every probe for one parameter set on a held-out scene set."""

from __future__ import annotations

import numpy as np

from .distill.model import EncoderConfig, ModelParams, encode
from .metrics import (correspondence, depth_probe, patch_depth_targets, patch_majority_labels,
                      relative_view_angle, segmentation_probe)

ANGLE_BIN_DEG = 15.0


def scene_features(params: ModelParams, scenes, enc: EncoderConfig) -> list[list[np.ndarray]]:
    return [[encode(params, v.image, enc) for v in s.views] for s in scenes]


def correspondence_stats(feats, scenes, threshold_px: float = 10.0, gaps=(1, 2)) -> dict:
    """Pooled recall over view pairs ``(k, k + gap)`` of every scene, plus a per-angle breakdown."""
    hits = queries = 0
    bins: dict[int, list[int]] = {}
    for f, s in zip(feats, scenes):
        n = len(s.views)
        for gap in gaps:
            for k in range(n - gap):
                a, b = s.views[k], s.views[k + gap]
                res = correspondence(f[k], f[k + gap], a.depth, a.camera, b.camera, threshold_px)
                hits += res.hits
                queries += res.queries
                key = int(relative_view_angle(a.camera, b.camera) // ANGLE_BIN_DEG)
                acc = bins.setdefault(key, [0, 0])
                acc[0] += res.hits
                acc[1] += res.queries
    by_angle = {f"{k * ANGLE_BIN_DEG:.0f}-{(k + 1) * ANGLE_BIN_DEG:.0f}": (h / q if q else 0.0)
                for k, (h, q) in sorted(bins.items())}
    return {"recall": hits / queries if queries else 0.0, "queries": queries, "by_angle": by_angle}


def _patch_dataset(feats, scenes, grid: int):
    X, depth, valid, cls = [], [], [], []
    for f, s in zip(feats, scenes):
        for k, v in enumerate(s.views):
            d, ok = patch_depth_targets(v.depth[..., 0], grid, grid)
            X.append(f[k].reshape(-1, f[k].shape[-1]))
            depth.append(d)
            valid.append(ok)
            cls.append(patch_majority_labels(s.class_mask(k), grid, grid))
    return np.concatenate(X), np.concatenate(depth), np.concatenate(valid), np.concatenate(cls)


def split_scenes(scenes, fit_fraction: float = 0.6):
    n_fit = max(1, int(np.ceil(fit_fraction * len(scenes))))
    if n_fit >= len(scenes):
        n_fit = len(scenes) - 1
    return scenes[:n_fit], scenes[n_fit:]


def evaluate(params: ModelParams, scenes, enc: EncoderConfig, ridge_lambda: float = 1e-3,
             seg_l2: float = 1e-3, threshold_px: float = 10.0) -> dict:
    """Correspondence recall on all held-out scenes; depth and segmentation probes fit on the first
    ~60% of them and scored on the rest."""
    if len(scenes) < 2:
        raise ValueError("evaluation needs at least two held-out scenes")
    feats = scene_features(params, scenes, enc)
    corr = correspondence_stats(feats, scenes, threshold_px)
    fit, test = split_scenes(scenes)
    nf = len(fit)
    Xf, df, vf, cf = _patch_dataset(feats[:nf], fit, enc.grid)
    Xt, dt, vt, ct = _patch_dataset(feats[nf:], test, enc.grid)
    rmse, absrel = depth_probe(Xf[vf], df[vf], Xt[vt], dt[vt], ridge_lambda)
    acc, miou = segmentation_probe(Xf, cf, Xt, ct, seg_l2)
    return {
        "correspondence_recall": corr["recall"],
        "correspondence_queries": corr["queries"],
        "correspondence_by_angle": corr["by_angle"],
        "depth_rmse": rmse,
        "depth_absrel": absrel,
        "depth_samples": int(vt.sum()),
        "seg_accuracy": acc,
        "seg_miou": miou,
        "seg_samples": int(ct.size),
    }
