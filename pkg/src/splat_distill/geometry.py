"""Domain types and pinhole camera math.

Conventions used everywhere in the package:

* camera frame is OpenCV style (x right, y down, z forward);
* ``Camera.rotation``/``Camera.translation`` map world to camera,
  ``x_cam = R @ x_world + t``;
* pixel ``(i, j)`` (row, column) has its continuous center at
  ``(j + 0.5, i + 0.5)``;
* all arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEPTH_EPSILON = 1e-6


class BehindCamera(ValueError):
    """Raised when a point lies at or behind the camera plane."""


# --------------------------------------------------------------------------- #
#                               Rotations                                     #
# --------------------------------------------------------------------------- #

def quat_to_rotmat(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion. The input is normalized."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched version of :func:`quat_to_rotmat`, ``(N, 4) -> (N, 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion with w >= 0 for a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rotation matrix for a right-handed rotation of ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


# --------------------------------------------------------------------------- #
#                               Rigid poses                                   #
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("pose rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows are camera axes in world coords
    # re-orthonormalize to kill accumulated rounding
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Pose(R, -R @ eye)


# --------------------------------------------------------------------------- #
#                               Domain types                                  #
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int, pose: Pose | None = None) -> "Camera":
        """Square-pixel camera with horizontal field of view ``fov_deg`` and a centered principal point."""
        f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
        return cls(f, f, width / 2.0, height / 2.0, width, height, pose or Pose())

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.pose.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def projection_matrix(self) -> np.ndarray:
        """The 3x4 matrix ``K [R | t]``."""
        return self.K() @ self.pose.matrix()[:3]

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   Pose(np.array(d["rotation"]), np.array(d["translation"])))


@dataclass(frozen=True)
class Gaussian:
    """One 3D primitive. The quaternion is normalized on construction."""

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    label: int = 0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(3)
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not n > 0:
            raise ValueError("quaternion must be non-zero")
        scale = np.array(self.scale, dtype=np.float64).reshape(3)
        if np.any(scale <= 0):
            raise ValueError("scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        if self.label < 0:
            raise ValueError("label must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "feature", np.array(self.feature, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "label", int(self.label))


def covariance_of(g: Gaussian) -> np.ndarray:
    """``R diag(scale^2) R^T``."""
    R = quat_to_rotmat(g.rotation)
    return (R * g.scale ** 2) @ R.T


@dataclass
class GaussianCloud:
    """Struct-of-arrays container for many Gaussians.

    The renderer and lifter work on this form; :class:`Gaussian` is the
    single-primitive view returned by indexing.
    """

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        q = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        # rows already unit to a few ulp are kept bit-exact so save/load round trips
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        self.quats = np.where(np.abs(norm - 1.0) <= 4 * np.finfo(float).eps, q, q / norm) if n else q
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        self.features = f.reshape(n, f.shape[-1] if f.ndim == 2 else 0) if n == 0 else f.reshape(n, -1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i], self.quats[i], self.scales[i], self.opacities[i],
                        self.features[i], self.labels[i])

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @classmethod
    def empty(cls, channels: int = 0) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, channels)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_list(cls, gaussians: Iterable[Gaussian]) -> "GaussianCloud":
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls(np.stack([g.mean for g in gs]), np.stack([g.rotation for g in gs]),
                   np.stack([g.scale for g in gs]), np.array([g.opacity for g in gs]),
                   np.stack([g.feature for g in gs]), np.array([g.label for g in gs]))

    def with_features(self, features: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(self.means, self.quats, self.scales, self.opacities, features, self.labels)

    def covariances(self) -> np.ndarray:
        R = quats_to_rotmats(self.quats)
        return np.einsum("nij,nj,nkj->nik", R, self.scales ** 2, R)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.means[idx], self.quats[idx], self.scales[idx], self.opacities[idx],
                             self.features[idx], self.labels[idx])

    @classmethod
    def concat(cls, clouds: Sequence["GaussianCloud"]) -> "GaussianCloud":
        return cls(np.concatenate([c.means for c in clouds]), np.concatenate([c.quats for c in clouds]),
                   np.concatenate([c.scales for c in clouds]), np.concatenate([c.opacities for c in clouds]),
                   np.concatenate([c.features for c in clouds]), np.concatenate([c.labels for c in clouds]))


def check_feature_map(arr: np.ndarray, channels: int | None = None) -> np.ndarray:
    """Validate an ``(H, W, C)`` float map and return it as contiguous float64."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"feature map must be (H, W, C) with positive dims, got {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map has non-finite entries")
    return arr


def check_mask(mask: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate an ``(H, W)`` non-negative integer label grid."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.issubdtype(mask.dtype, np.integer):
        raise ValueError("semantic mask must be a 2-D integer array")
    if np.any(mask < 0):
        raise ValueError("semantic labels must be non-negative")
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    return mask.astype(np.int64, copy=False)


# --------------------------------------------------------------------------- #
#                            Projection                                       #
# --------------------------------------------------------------------------- #

def project_point(cam: Camera, p: Sequence[float], eps: float = DEPTH_EPSILON) -> tuple[np.ndarray, float]:
    """Pixel coordinates and camera-z of a world point.

    Raises :class:`BehindCamera` when ``z <= eps``.
    """
    x, y, z = cam.pose.apply(np.asarray(p, dtype=np.float64))
    if z <= eps:
        raise BehindCamera(f"point at camera depth {z:.3g} is behind the camera")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]), float(z)


def project_points(cam: Camera, pts: np.ndarray, eps: float = DEPTH_EPSILON):
    """Vectorized projection. Returns ``(uv (N,2), z (N,), valid (N,))``; uv is NaN where invalid."""
    pc = cam.pose.apply(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    valid = z > eps
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
    uv[~valid] = np.nan
    return uv, z, valid


def unproject_pixel(cam: Camera, u: Sequence[float], depth: float) -> np.ndarray:
    """World point at camera-z ``depth`` seen at continuous pixel coordinates ``u``."""
    if not depth > 0:
        raise ValueError("depth must be positive")
    pc = np.array([(u[0] - cam.cx) / cam.fx * depth, (u[1] - cam.cy) / cam.fy * depth, depth])
    return cam.rotation.T @ (pc - cam.translation)


def unproject_pixels(cam: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Batched :func:`unproject_pixel`, ``(N,2), (N,) -> (N,3)``."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    pc = np.stack([(uv[:, 0] - cam.cx) / cam.fx * depth, (uv[:, 1] - cam.cy) / cam.fy * depth, depth], axis=1)
    return (pc - cam.translation) @ cam.rotation


def pixel_centers(height: int, width: int) -> np.ndarray:
    """``(H, W, 2)`` array of continuous ``(x, y)`` pixel centers."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs + 0.5, ys + 0.5], axis=-1)


# --------------------------------------------------------------------------- #
#                           Resampling                                        #
# --------------------------------------------------------------------------- #

def bilinear_taps(n_out: int, n_in: int):
    """Source indices and weights for 1-D bilinear resampling.

    Half-pixel aligned (output center ``k + 0.5`` maps to input coordinate
    ``(k + 0.5) * n_in / n_out - 0.5``), clamped at the borders.
    Returns ``(i0, i1, w1)`` with the sample being ``(1 - w1) * a[i0] + w1 * a[i1]``.
    """
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of an ``(H, W, C)`` map (no antialiasing)."""
    arr = np.asarray(arr, dtype=np.float64)
    r0, r1, wr = bilinear_taps(out_h, arr.shape[0])
    c0, c1, wc = bilinear_taps(out_w, arr.shape[1])
    wr = wr[:, None, None]
    wc = wc[None, :, None]
    top = arr[r0][:, c0] * (1 - wc) + arr[r0][:, c1] * wc
    bot = arr[r1][:, c0] * (1 - wc) + arr[r1][:, c1] * wc
    return top * (1 - wr) + bot * wr
