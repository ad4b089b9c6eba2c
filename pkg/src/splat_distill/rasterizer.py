"""Forward-only feature splatting.

Gaussians are flattened to screen-space ellipses (EWA), sorted once by
``(depth, gaussian_index)`` and alpha-composited front to back. Features
may carry any number of channels.

``render`` bins splats into 16x16 tiles and composites tiles in
parallel; ``render_reference`` walks every splat for every pixel. Both
evaluate the same scalar kernel in the same order, so they agree bit for
bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

# the system TBB is older than numba supports
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

from .geometry import DEPTH_EPSILON, Camera, Gaussian, GaussianCloud, covariance_of, project_points

LOWPASS_FLOOR = 0.3
ALPHA_CLAMP = 0.999
TRANSMITTANCE_CUTOFF = 1e-4
TILE = 16
EXTENT_SIGMAS = 3.0
NEAR_PLANE = 0.05
FRUSTUM_SLACK = 1.3


@dataclass(frozen=True)
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    feature: np.ndarray
    gaussian_index: int

    def conic(self) -> tuple[float, float, float]:
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        det = a * c - b * b
        return c / det, -b / det, a / det


@dataclass
class RenderOutput:
    features: np.ndarray  # (H, W, C)
    alpha: np.ndarray  # (H, W, 1)


@dataclass
class ProjectedSplats:
    """Screen-space splats, already in compositing order."""

    centers: np.ndarray  # (M, 2)
    conics: np.ndarray  # (M, 3) inverse covariance (a, b, c)
    cov2d: np.ndarray  # (M, 2, 2)
    depths: np.ndarray
    opacities: np.ndarray
    features: np.ndarray  # (M, C)
    index: np.ndarray  # original gaussian index
    rects: np.ndarray  # (M, 4) inclusive pixel bounds x0, x1, y0, y1

    def __len__(self):
        return self.centers.shape[0]

    def splat(self, k: int) -> Splat2D:
        return Splat2D(self.centers[k], self.cov2d[k], float(self.depths[k]), float(self.opacities[k]),
                       self.features[k], int(self.index[k]))


def _screen_covariances(cov3d: np.ndarray, pc: np.ndarray, cam: Camera, lowpass: float) -> np.ndarray:
    W = cam.rotation
    cov_cam = np.einsum("ij,njk,lk->nil", W, cov3d, W)
    z = pc[:, 2]
    # linearize at the frustum border for off-screen means (3DGS guard)
    lim_x = FRUSTUM_SLACK * max(cam.cx, cam.width - cam.cx) / cam.fx
    lim_y = FRUSTUM_SLACK * max(cam.cy, cam.height - cam.cy) / cam.fy
    x = np.clip(pc[:, 0] / z, -lim_x, lim_x) * z
    y = np.clip(pc[:, 1] / z, -lim_y, lim_y) * z
    J = np.zeros((pc.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d = 0.5 * (cov2d + cov2d.transpose(0, 2, 1))
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass
    return cov2d


def _pixel_rects(centers: np.ndarray, cov2d: np.ndarray, width: int, height: int) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    r = EXTENT_SIGMAS * np.sqrt(lam_max)
    # pixel j is covered when |j + 0.5 - u| <= r
    x0 = np.ceil(centers[:, 0] - r - 0.5)
    x1 = np.floor(centers[:, 0] + r - 0.5)
    y0 = np.ceil(centers[:, 1] - r - 0.5)
    y1 = np.floor(centers[:, 1] + r - 0.5)
    rects = np.stack([np.clip(x0, 0, width), np.clip(x1, -1, width - 1),
                      np.clip(y0, 0, height), np.clip(y1, -1, height - 1)], axis=1)
    return rects.astype(np.int64)


def project_gaussians(cloud: GaussianCloud, cam: Camera, lowpass: float = LOWPASS_FLOOR) -> ProjectedSplats:
    """Project, cull and depth-sort a whole cloud."""
    n = len(cloud)
    if n == 0:
        C = cloud.features.shape[1] if cloud.features.ndim == 2 else 0
        return ProjectedSplats(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 2, 2)), np.zeros(0),
                               np.zeros(0), np.zeros((0, C)), np.zeros(0, dtype=np.int64),
                               np.zeros((0, 4), dtype=np.int64))
    uv, z, valid = project_points(cam, cloud.means, DEPTH_EPSILON)
    valid &= z > NEAR_PLANE
    idx = np.flatnonzero(valid)
    pc = cam.pose.apply(cloud.means[idx])
    cov2d = _screen_covariances(cloud.covariances()[idx], pc, cam, lowpass)
    centers = uv[idx]
    rects = _pixel_rects(centers, cov2d, cam.width, cam.height)
    on_screen = (rects[:, 0] <= rects[:, 1]) & (rects[:, 2] <= rects[:, 3])
    keep = np.flatnonzero(on_screen)
    idx, centers, cov2d, rects = idx[keep], centers[keep], cov2d[keep], rects[keep]
    depths = z[idx]
    order = np.lexsort((idx, depths))
    idx, centers, cov2d, rects, depths = idx[order], centers[order], cov2d[order], rects[order], depths[order]
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    return ProjectedSplats(
        np.ascontiguousarray(centers), np.ascontiguousarray(conics), cov2d, depths,
        np.ascontiguousarray(cloud.opacities[idx]), np.ascontiguousarray(cloud.features[idx]),
        idx.astype(np.int64), np.ascontiguousarray(rects),
    )


def project_gaussian(g: Gaussian, cam: Camera, lowpass: float = LOWPASS_FLOOR) -> Splat2D | None:
    """Screen-space splat of one Gaussian, or ``None`` when culled."""
    pc = cam.pose.apply(g.mean)
    if pc[2] <= max(DEPTH_EPSILON, NEAR_PLANE):
        return None
    center = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
    cov2d = _screen_covariances(covariance_of(g)[None], pc[None], cam, lowpass)
    rect = _pixel_rects(center[None], cov2d, cam.width, cam.height)[0]
    if rect[0] > rect[1] or rect[2] > rect[3]:
        return None
    return Splat2D(center, cov2d[0], float(pc[2]), g.opacity, g.feature, 0)


# --------------------------------------------------------------------------- #
#                           Compositing kernels                               #
# --------------------------------------------------------------------------- #

@numba.njit(cache=True, inline="always")
def _splat_alpha(px, py, cx, cy, ca, cb, cc, opacity, alpha_clamp):
    dx = px - cx
    dy = py - cy
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    if power > 0.0:
        power = 0.0
    alpha = opacity * math.exp(power)
    if alpha > alpha_clamp:
        alpha = alpha_clamp
    return alpha


def composite_pixel(splats, pixel, channels: int = 0, alpha_clamp: float = ALPHA_CLAMP,
                    transmittance_cutoff: float = TRANSMITTANCE_CUTOFF):
    """Front-to-back composite of depth-ascending splats at continuous pixel position ``pixel``.

    Returns ``(feature, alpha)``; an empty list gives ``(zeros, 0.0)``.
    """
    splats = list(splats)
    if not splats:
        return np.zeros(channels), 0.0
    px, py = float(pixel[0]), float(pixel[1])
    acc = np.zeros(len(splats[0].feature))
    T = 1.0
    for s in splats:
        ca, cb, cc = s.conic()
        alpha = _splat_alpha.py_func(px, py, s.center[0], s.center[1], ca, cb, cc, s.opacity, alpha_clamp)
        w = alpha * T
        for ch in range(acc.shape[0]):
            acc[ch] += s.feature[ch] * w
        T = T * (1.0 - alpha)
        if T < transmittance_cutoff:
            break
    return acc, 1.0 - T


@numba.njit(cache=True)
def _composite_reference(centers, conics, opacities, features, rects, height, width,
                         alpha_clamp, t_cutoff, out, out_alpha):
    n = centers.shape[0]
    C = features.shape[1]
    for i in range(height):
        py = i + 0.5
        for j in range(width):
            px = j + 0.5
            T = 1.0
            for k in range(n):
                if j < rects[k, 0] or j > rects[k, 1] or i < rects[k, 2] or i > rects[k, 3]:
                    continue
                alpha = _splat_alpha(px, py, centers[k, 0], centers[k, 1], conics[k, 0], conics[k, 1],
                                     conics[k, 2], opacities[k], alpha_clamp)
                w = alpha * T
                for ch in range(C):
                    out[i, j, ch] += features[k, ch] * w
                T = T * (1.0 - alpha)
                if T < t_cutoff:
                    break
            out_alpha[i, j, 0] = 1.0 - T


@numba.njit(cache=True)
def _bin_tiles(rects, tiles_x, tiles_y, tile):
    n = rects.shape[0]
    counts = np.zeros(tiles_x * tiles_y, dtype=np.int64)
    for k in range(n):
        for ty in range(rects[k, 2] // tile, rects[k, 3] // tile + 1):
            for tx in range(rects[k, 0] // tile, rects[k, 1] // tile + 1):
                counts[ty * tiles_x + tx] += 1
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    for t in range(tiles_x * tiles_y):
        offsets[t + 1] = offsets[t] + counts[t]
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    # splats arrive in compositing order, so every tile list stays sorted
    for k in range(n):
        for ty in range(rects[k, 2] // tile, rects[k, 3] // tile + 1):
            for tx in range(rects[k, 0] // tile, rects[k, 1] // tile + 1):
                t = ty * tiles_x + tx
                lists[fill[t]] = k
                fill[t] += 1
    return offsets, lists


@numba.njit(cache=True, parallel=True)
def _composite_tiled(centers, conics, opacities, features, rects, offsets, lists, height, width,
                     tiles_x, tiles_y, tile, alpha_clamp, t_cutoff, out, out_alpha):
    C = features.shape[1]
    for t in numba.prange(tiles_x * tiles_y):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        for i in range(ty * tile, min((ty + 1) * tile, height)):
            py = i + 0.5
            for j in range(tx * tile, min((tx + 1) * tile, width)):
                px = j + 0.5
                T = 1.0
                for q in range(start, stop):
                    k = lists[q]
                    if j < rects[k, 0] or j > rects[k, 1] or i < rects[k, 2] or i > rects[k, 3]:
                        continue
                    alpha = _splat_alpha(px, py, centers[k, 0], centers[k, 1], conics[k, 0], conics[k, 1],
                                         conics[k, 2], opacities[k], alpha_clamp)
                    w = alpha * T
                    for ch in range(C):
                        out[i, j, ch] += features[k, ch] * w
                    T = T * (1.0 - alpha)
                    if T < t_cutoff:
                        break
                out_alpha[i, j, 0] = 1.0 - T


def _cloud_of(scene) -> GaussianCloud:
    return scene.gaussians if hasattr(scene, "gaussians") else scene


def _prepare(scene, cam: Camera, lowpass: float):
    cloud = _cloud_of(scene)
    C = cloud.features.shape[1]
    proj = project_gaussians(cloud, cam, lowpass)
    out = np.zeros((cam.height, cam.width, C))
    out_alpha = np.zeros((cam.height, cam.width, 1))
    return proj, out, out_alpha


def render(scene, cam: Camera, *, lowpass: float = LOWPASS_FLOOR, alpha_clamp: float = ALPHA_CLAMP,
           transmittance_cutoff: float = TRANSMITTANCE_CUTOFF, projected: ProjectedSplats | None = None) -> RenderOutput:
    """Tiled render of a :class:`~splat_distill.lifting.FeatureScene` or a bare cloud."""
    if projected is None:
        proj, out, out_alpha = _prepare(scene, cam, lowpass)
    else:
        proj = projected
        out = np.zeros((cam.height, cam.width, proj.features.shape[1]))
        out_alpha = np.zeros((cam.height, cam.width, 1))
    if len(proj) == 0:
        return RenderOutput(out, out_alpha)
    tiles_x = -(-cam.width // TILE)
    tiles_y = -(-cam.height // TILE)
    offsets, lists = _bin_tiles(proj.rects, tiles_x, tiles_y, TILE)
    _composite_tiled(proj.centers, proj.conics, proj.opacities, proj.features, proj.rects, offsets, lists,
                     cam.height, cam.width, tiles_x, tiles_y, TILE, alpha_clamp, transmittance_cutoff,
                     out, out_alpha)
    return RenderOutput(out, out_alpha)


def render_reference(scene, cam: Camera, *, lowpass: float = LOWPASS_FLOOR, alpha_clamp: float = ALPHA_CLAMP,
                     transmittance_cutoff: float = TRANSMITTANCE_CUTOFF) -> RenderOutput:
    """O(pixels x splats) oracle for :func:`render`."""
    proj, out, out_alpha = _prepare(scene, cam, lowpass)
    if len(proj) == 0:
        return RenderOutput(out, out_alpha)
    _composite_reference(proj.centers, proj.conics, proj.opacities, proj.features, proj.rects,
                         cam.height, cam.width, alpha_clamp, transmittance_cutoff, out, out_alpha)
    return RenderOutput(out, out_alpha)


def set_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
