"""One distillation iteration: build the teacher's splatted target, fit the student to it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..blending import semantic_blend
from ..geometry import bilinear_resize
from ..lifting import attach_features, bilinear_upscale, lift_geometry, mask_aware_upscale
from ..rasterizer import render
from .losses import cosine_loss_grad, distill_loss_grad, entropy, mse_loss_grad, softmax
from .model import EncoderConfig, HeadConfig, ModelParams, encode, encode_backward, head_backward, head_logits, init_params
from .optim import adam_update, ema_update

log = logging.getLogger(__name__)

LOSS_KINDS = ("distill", "cosine", "mse")


@dataclass
class TrainSettings:
    """The subset of the run configuration a training step reads."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    tau_s: float = 0.1
    tau_t: float = 0.07
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    ema_momentum: float = 0.999
    ema_every: int = 10
    teacher: str = "ema"  # ema | frozen
    head_mode: str = "ema"  # shared | ema
    upscale: str = "mask"  # mask | bilinear
    blend: bool = True
    blend_alpha: float = 0.5
    blend_alpha_weighted: bool = False
    loss: str = "distill"  # distill | cosine | mse
    target: str = "novel"  # novel | context
    context_gap: int = 2
    stride: int = 1


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    step: int
    m: np.ndarray
    v: np.ndarray
    seed: int

    def __post_init__(self):
        if not self.student.same_layout(self.teacher):
            raise ValueError("student and teacher must share one segment map")

    def copy(self) -> "TrainState":
        return TrainState(self.student.copy(), self.teacher.copy(), self.step, self.m.copy(), self.v.copy(), self.seed)


def init_state(settings: TrainSettings, seed: int) -> TrainState:
    """Student and teacher start from the same random draw."""
    student = init_params(settings.encoder, settings.head, np.random.default_rng([seed, 100]))
    return TrainState(student, student.copy(), 0, np.zeros(student.size), np.zeros(student.size), seed)


# --------------------------------------------------------------------------- #
#                              Gradients                                      #
# --------------------------------------------------------------------------- #

def teacher_logits(state: TrainState, target_feats: np.ndarray, head_mode: str = "shared") -> np.ndarray:
    head_params = state.student if head_mode == "shared" else state.teacher
    return head_logits(head_params, target_feats)


def loss_and_grad(state: TrainState, image: np.ndarray, teacher_target: np.ndarray, loss_kind: str,
                  settings: TrainSettings) -> tuple[float, np.ndarray, dict]:
    """Loss, gradient over the student vector, and diagnostics.

    ``teacher_target`` is the downscaled ``(h, w, C)`` teacher map; it and
    everything computed from it are constants here.
    """
    enc = settings.encoder
    params = state.student
    grad = params.like(np.zeros(params.size))
    cache: dict = {}
    feats = encode(params, image, enc, cache)
    diag = {}
    if loss_kind == "distill":
        t_logits = teacher_logits(state, teacher_target, settings.head_mode)
        hcache: dict = {}
        s_logits = head_logits(params, feats, hcache)
        loss, d_logits = distill_loss_grad(s_logits, t_logits, settings.tau_s, settings.tau_t)
        d_feats = head_backward(params, hcache, d_logits, grad)
        usage = softmax(t_logits / settings.tau_t).mean(axis=0)
        diag["proto_entropy"] = float(-(usage * np.log(np.maximum(usage, 1e-300))).sum())
        diag["teacher_entropy"] = entropy(t_logits, settings.tau_t)
    elif loss_kind == "cosine":
        loss, d_feats = cosine_loss_grad(feats.reshape(-1, enc.embed_dim), teacher_target.reshape(-1, enc.embed_dim))
    elif loss_kind == "mse":
        loss, d_feats = mse_loss_grad(feats.reshape(-1, enc.embed_dim), teacher_target.reshape(-1, enc.embed_dim))
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    encode_backward(params, cache, d_feats, grad, enc)
    bad = ~np.isfinite(grad.vector)
    if bad.any():
        raise FloatingPointError(f"non-finite gradient in segment {grad.segment_of(int(np.flatnonzero(bad)[0]))}")
    return loss, grad.vector, diag


def backward(state: TrainState, image: np.ndarray, teacher_target: np.ndarray, loss_kind: str,
             settings: TrainSettings) -> np.ndarray:
    """Exact gradient of the chosen loss with respect to the student parameters."""
    return loss_and_grad(state, image, teacher_target, loss_kind, settings)[1]


def sgd_adam_step(state: TrainState, grads: np.ndarray, lr: float, betas=(0.9, 0.999),
                  weight_decay: float = 0.0) -> TrainState:
    """AdamW update of the student; the teacher is untouched."""
    step = state.step + 1
    vec, m, v = adam_update(state.student.vector, grads, state.m, state.v, step, lr, betas, weight_decay)
    return TrainState(state.student.like(vec), state.teacher, step, m, v, state.seed)


# --------------------------------------------------------------------------- #
#                            Teacher target                                   #
# --------------------------------------------------------------------------- #

class LiftCache:
    """Depth-lifted Gaussian scaffolds keyed by (scene index, view pair); geometry never changes."""

    def __init__(self):
        self._store = {}

    def get(self, key, views, stride):
        if key not in self._store:
            self._store[key] = lift_geometry(views, stride)
        return self._store[key]


def teacher_target(teacher: ModelParams, scene, ctx: tuple[int, int], tgt: int, settings: TrainSettings,
                   lift_cache: LiftCache | None = None, scene_key=None):
    """Splatted (and optionally blended) teacher features at the target view.

    Returns ``(full-res map (H, W, C), rendered alpha (H, W, 1))``, or
    ``None`` when the context views lift to no Gaussians at all.
    """
    views = [scene.views[i] for i in ctx]
    highs = []
    for view in views:
        low = encode(teacher, view.image, settings.encoder)
        H, W = view.mask.shape
        if settings.upscale == "mask":
            highs.append(mask_aware_upscale(low, view.mask))
        else:
            highs.append(bilinear_upscale(low, H, W))
    if lift_cache is not None:
        cloud, source = lift_cache.get((scene_key, tuple(ctx), settings.stride), views, settings.stride)
    else:
        cloud, source = lift_geometry(views, settings.stride)
    if len(cloud) == 0:
        return None
    fscene = attach_features(cloud, source, highs)
    target_view = scene.views[tgt]
    out = render(fscene, target_view.camera)
    feats = out.features
    if settings.blend:
        weights = out.alpha[..., 0] if settings.blend_alpha_weighted else None
        feats = semantic_blend(feats, target_view.mask, settings.blend_alpha, weights)
    return feats, out.alpha


def sample_views(rng: np.random.Generator, num_views: int, settings: TrainSettings):
    gap = settings.context_gap
    start = int(rng.integers(0, num_views - gap))
    ctx = (start, start + gap)
    if settings.target == "context":
        tgt = ctx[int(rng.integers(2))]
    else:
        tgt = start + gap // 2
    return ctx, tgt


def train_step(state: TrainState, scenes, settings: TrainSettings, lift_cache: LiftCache | None = None):
    """One iteration on one scene drawn from ``scenes``.

    All randomness derives from ``(state.seed, state.step)``. Returns the
    new state and a diagnostics dict.
    """
    rng = np.random.default_rng([state.seed, 7, state.step])
    si = int(rng.integers(len(scenes)))
    scene = scenes[si]
    ctx, tgt = sample_views(rng, len(scene.views), settings)
    result = teacher_target(state.teacher, scene, ctx, tgt, settings, lift_cache, si)
    if result is None or not (result[1] > 0).any():
        log.warning("scene %d gave no Gaussians for views %s -> %d; skipping step", si, ctx, tgt)
        skipped = TrainState(state.student, state.teacher, state.step + 1, state.m, state.v, state.seed)
        return skipped, {"step": skipped.step, "skipped": True}
    full, _ = result
    g = settings.encoder.grid
    target = bilinear_resize(full, g, g)
    image = scene.views[tgt].image
    loss, grads, diag = loss_and_grad(state, image, target, settings.loss, settings)
    new = sgd_adam_step(state, grads, settings.lr, settings.betas, settings.weight_decay)
    if settings.teacher == "ema" and new.step % settings.ema_every == 0:
        new = TrainState(new.student, ema_update(new.teacher, new.student, settings.ema_momentum),
                         new.step, new.m, new.v, new.seed)
    diag.update(step=new.step, loss=loss, grad_norm=float(np.linalg.norm(grads)), scene=si, ctx=list(ctx), tgt=tgt)
    return new, diag
