"""PCA feature images and report figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GRAY = 128


def pca_rgb(feats: np.ndarray) -> np.ndarray:
    """Top-3 principal components of the token features as an 8-bit ``(h, w, 3)`` image.

    Each component is min-max scaled to [0, 255]; its sign makes the
    largest-magnitude loading positive. Components without variance map
    to mid gray.
    """
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 3 or f.shape[-1] < 3:
        raise ValueError("pca_rgb needs an (h, w, C) map with C >= 3")
    h, w, C = f.shape
    X = f.reshape(-1, C)
    X = X - X.mean(axis=0)
    out = np.full((h * w, 3), GRAY, dtype=np.uint8)
    scale = np.abs(X).max()
    if scale == 0:
        return out.reshape(h, w, 3)
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    for k in range(min(3, Vt.shape[0])):
        if s[k] <= 1e-12 * s[0] or s[k] == 0:
            continue
        v = Vt[k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        p = X @ v
        lo, hi = p.min(), p.max()
        if hi - lo <= 1e-12 * scale:
            continue
        out[:, k] = np.round((p - lo) / (hi - lo) * 255).astype(np.uint8)
    return out.reshape(h, w, 3)


def pca_visualize(feats: np.ndarray, path: str | Path, upscale: int = 8) -> np.ndarray:
    """Write the PCA image (nearest-neighbor enlarged by ``upscale``) as PNG; return the 8-bit array."""
    img = pca_rgb(feats)
    big = img.repeat(upscale, axis=0).repeat(upscale, axis=1)
    save_rgb(path, big)
    return img


def save_rgb(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    plt.imsave(str(path), img, format="png")


def plot_loss_curve(records: list[dict], path: str | Path) -> None:
    steps = np.array([r["step"] for r in records])
    loss = np.array([r["loss"] for r in records])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, lw=0.6, alpha=0.35, color="C0", label="per step")
    if len(loss) >= 50:
        k = 50
        smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, color="C0", lw=1.5, label=f"{k}-step mean")
    ent = [r.get("proto_entropy") for r in records]
    if any(e is not None for e in ent):
        ax2 = ax.twinx()
        ax2.plot(steps, [np.nan if e is None else e for e in ent], color="C3", lw=0.8, alpha=0.6)
        ax2.set_ylabel("prototype usage entropy (nats)", color="C3")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_correspondence_by_angle(by_angle: dict[str, dict[str, float]], path: str | Path) -> None:
    """``by_angle`` maps a model name to ``{angle bin: recall}``."""
    bins = sorted({b for v in by_angle.values() for b in v}, key=lambda b: float(b.split("-")[0]))
    x = np.arange(len(bins))
    width = 0.8 / max(1, len(by_angle))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, (name, vals) in enumerate(by_angle.items()):
        ax.bar(x + i * width, [vals.get(b, np.nan) for b in bins], width, label=name)
    ax.set_xticks(x + width * (len(by_angle) - 1) / 2)
    ax.set_xticklabels([f"{b} deg" for b in bins])
    ax.set_ylabel("recall @ threshold")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: list[dict], path: str | Path) -> None:
    """Bar chart of depth RMSE and segmentation accuracy per ablation row."""
    labels = [r["label"] for r in rows]
    y = np.arange(len(rows))
    fig, axes = plt.subplots(1, 3, figsize=(12, 0.45 * len(rows) + 1.5), sharey=True)
    for ax, key, title in zip(axes, ("depth_rmse", "seg_accuracy", "correspondence_recall"),
                              ("depth RMSE (lower is better)", "segmentation accuracy", "correspondence recall")):
        vals = [r[key] for r in rows]
        ax.barh(y, vals, color=["C1" if r["ablation"] == "full" else "C0" for r in rows])
        lo, hi = min(vals), max(vals)
        pad = 0.1 * (hi - lo) if hi > lo else 0.05 * abs(hi) + 1e-3
        ax.set_xlim(lo - pad, hi + pad)
        ax.set_title(title, fontsize=9)
    axes[0].set_yticks(y)
    axes[0].set_yticklabels(labels, fontsize=8)
    axes[0].invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
