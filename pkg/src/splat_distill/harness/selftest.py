"""Fast oracle and gradient gates, runnable from a fresh checkout."""

from __future__ import annotations

import time

import numpy as np

from ..blending import semantic_blend
from ..distill.model import EncoderConfig, HeadConfig, init_params
from ..distill.optim import ema_update
from ..distill.train import TrainSettings, TrainState, loss_and_grad
from ..geometry import Camera, GaussianCloud, bilinear_resize
from ..lifting import mask_aware_upscale
from ..rasterizer import render, render_reference


def _random_cloud(rng, n, C):
    means = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n), rng.uniform(1.0, 6.0, n)])
    return GaussianCloud(means, rng.normal(size=(n, 4)), rng.uniform(0.01, 0.3, (n, 3)), rng.uniform(0.05, 1.0, n),
                         rng.normal(size=(n, C)), np.zeros(n, dtype=np.int64))


def gate_rasterizer(scenes: int = 10, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    cam = Camera.from_fov(60, 64, 64)
    for k in range(scenes):
        cloud = _random_cloud(rng, int(rng.integers(1, 1001)), (1, 3, 32)[k % 3])
        a, b = render(cloud, cam), render_reference(cloud, cam)
        if not (np.array_equal(a.features, b.features) and np.array_equal(a.alpha, b.alpha)):
            return {"ok": False, "detail": f"scene {k} differs from the reference"}
    return {"ok": True, "detail": f"{scenes} scenes bit-exact"}


def fd_gradient_error(rng, loss_kind: str, h: float = 1e-5) -> float:
    """Worst relative error of the analytic gradient against central differences on a tiny random model."""
    p = int(rng.integers(1, 4))
    enc = EncoderConfig(image_size=2 * p, patch_size=p, channels_in=int(rng.integers(1, 4)),
                        embed_dim=int(rng.integers(2, 6)), hidden_dim=int(rng.integers(2, 7)),
                        pos_embed=bool(rng.integers(2)))
    head = HeadConfig(hidden=int(rng.integers(2, 7)), bottleneck=int(rng.integers(2, 5)),
                      prototypes=int(rng.integers(4, 9)))
    settings = TrainSettings(encoder=enc, head=head, loss=loss_kind, head_mode="ema")
    student = init_params(enc, head, rng)
    student.vector[...] += 0.1 * rng.standard_normal(student.size)
    teacher = student.like(student.vector + 0.3 * rng.standard_normal(student.size))
    zeros = np.zeros(student.size)
    image = rng.uniform(0, 1, (enc.image_size, enc.image_size, enc.channels_in))
    target = rng.normal(size=(enc.grid, enc.grid, enc.embed_dim))

    def loss_at(vec):
        return loss_and_grad(TrainState(student.like(vec), teacher, 0, zeros, zeros, 0), image, target,
                             loss_kind, settings)[0]

    grad = loss_and_grad(TrainState(student, teacher, 0, zeros, zeros, 0), image, target, loss_kind, settings)[1]
    worst = 0.0
    for k in range(student.size):
        plus, minus = student.vector.copy(), student.vector.copy()
        plus[k] += h
        minus[k] -= h
        num = (loss_at(plus) - loss_at(minus)) / (2 * h)
        err = abs(num - grad[k])
        if err > 1e-8:
            worst = max(worst, err / max(abs(num), abs(grad[k])))
    return worst


def gate_gradients(configs: int = 6, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    kinds = ("distill", "cosine", "mse")
    worst = max(fd_gradient_error(rng, kinds[k % 3]) for k in range(configs))
    return {"ok": worst < 1e-4, "detail": f"max relative error {worst:.2e} over {configs} configs"}


def gate_upscale(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    low = rng.normal(size=(8, 8, 4))
    uniform = np.full((64, 64), 2, dtype=np.int64)
    err = np.abs(mask_aware_upscale(low, uniform) - bilinear_resize(low, 64, 64)).max()
    mask = rng.integers(0, 3, (8, 8)).repeat(8, 0).repeat(8, 1)
    perm = np.array([7, 3, 11])
    same = np.array_equal(mask_aware_upscale(low, mask), mask_aware_upscale(low, perm[mask]))
    return {"ok": bool(err <= 1e-12 and same), "detail": f"uniform-mask error {err:.1e}; permutation equal {same}"}


def gate_blend(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(16, 16, 3))
    mask = rng.integers(0, 4, (16, 16))
    alpha = 0.37
    out = semantic_blend(F, mask, alpha)
    worst = 0.0
    for lab in np.unique(mask):
        sel = mask == lab
        worst = max(worst, np.abs(out[sel].mean(0) - F[sel].mean(0)).max(),
                    np.abs(out[sel].var(0) - alpha ** 2 * F[sel].var(0)).max())
    ident = np.array_equal(semantic_blend(F, mask, 1.0), F)
    return {"ok": bool(worst < 1e-9 and ident), "detail": f"mean/variance error {worst:.1e}; alpha=1 identity {ident}"}


def gate_ema(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    enc, head = EncoderConfig(image_size=8, patch_size=4), HeadConfig(hidden=4, bottleneck=2, prototypes=4)
    t, s = init_params(enc, head, rng), init_params(enc, head, rng)
    gap = np.linalg.norm(t.vector - s.vector)
    t2 = ema_update(t, s, 0.9)
    ratio = np.linalg.norm(t2.vector - s.vector) / gap
    return {"ok": abs(ratio - 0.9) < 1e-12, "detail": f"contraction ratio {ratio:.15f}"}


GATES = {
    "rasterizer_oracle": gate_rasterizer,
    "gradient_check": gate_gradients,
    "mask_upscale": gate_upscale,
    "semantic_blend": gate_blend,
    "ema_contraction": gate_ema,
}


def run_selftest() -> list[dict]:
    out = []
    for name, gate in GATES.items():
        t0 = time.perf_counter()
        res = gate()
        out.append({"gate": name, "ok": bool(res["ok"]), "detail": res["detail"],
                    "seconds": round(time.perf_counter() - t0, 3)})
    return out
