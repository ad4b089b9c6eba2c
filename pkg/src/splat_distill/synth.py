"""Procedural rooms with a few objects, seen from a ring of cameras.

A scene is a cloud of flat disc Gaussians on the surfaces of a floor,
four walls and ``num_objects`` primitives (boxes or ellipsoid clusters).
Each Gaussian carries an RGB color as its feature and an instance label.
Ground-truth images, depth and masks come from the same splatting
renderer used everywhere else, so depth-based lifting reconstructs the
scene it came from.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Camera, GaussianCloud, look_at, rotmat_to_quat
from .lifting import ContextView
from .rasterizer import render

KINDS = ("box", "ellipsoids")
# semantic classes shared across scenes; instance labels are per scene
CLASS_BACKGROUND, CLASS_FLOOR, CLASS_WALL, CLASS_BOX, CLASS_ELLIPSOIDS = range(5)
CLASS_NAMES = ("background", "floor", "wall", "box", "ellipsoids")
SHELL_OPACITY = 0.95
OBJECT_OPACITY = 0.95


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    label: int
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[ObjectSpec, ...]
    room_half_extent: float = 2.0
    wall_height: float = 2.4
    gaussians_per_object: int = 500
    shell_spacing: float = 0.08
    texture_amplitude: float = 0.3
    floor_color: tuple[float, float, float] = (0.55, 0.42, 0.3)
    wall_colors: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ValueError("a scene needs at least one object")
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels) or min(labels) < 1:
            raise ValueError("object labels must be unique and positive")
        for o in self.objects:
            if o.kind not in KINDS:
                raise ValueError(f"unknown object kind {o.kind!r}")
            if not all(0.0 <= c <= 1.0 for c in o.color):
                raise ValueError("object colors must lie in [0, 1]")
        if self.room_half_extent <= 0 or self.gaussians_per_object < 1:
            raise ValueError("room extent and gaussians_per_object must be positive")

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def floor_label(self) -> int:
        return max(o.label for o in self.objects) + 1

    def wall_labels(self) -> list[int]:
        return [self.floor_label + 1 + k for k in range(4)]

    def labels(self) -> list[int]:
        return [o.label for o in self.objects] + [self.floor_label] + self.wall_labels()

    def label_classes(self) -> dict[int, int]:
        """Instance label -> semantic class id (0 is background)."""
        out = {0: CLASS_BACKGROUND, self.floor_label: CLASS_FLOOR}
        out.update({lab: CLASS_WALL for lab in self.wall_labels()})
        out.update({o.label: CLASS_BOX if o.kind == "box" else CLASS_ELLIPSOIDS for o in self.objects})
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects"] = [asdict(o) for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["objects"] = tuple(ObjectSpec(o["kind"], int(o["label"]), tuple(o["color"])) for o in d["objects"])
        d["floor_color"] = tuple(d["floor_color"])
        d["wall_colors"] = tuple(tuple(c) for c in d["wall_colors"])
        return cls(**d)

    @classmethod
    def sample(cls, seed: int, num_objects: int = 4, **kw) -> "SceneSpec":
        """Random object kinds and per-class palette colors drawn from ``seed``."""
        if num_objects < 1:
            raise ValueError("num_objects must be at least 1")
        rng = np.random.default_rng([seed, 0])
        objects = []
        for k in range(num_objects):
            kind = KINDS[int(rng.integers(len(KINDS)))]
            if kind == "box":
                rgb = colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.6, 0.9), rng.uniform(0.55, 0.9))
            else:
                rgb = colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.25, 0.5), rng.uniform(0.7, 1.0))
            objects.append(ObjectSpec(kind, k + 1, tuple(float(c) for c in rgb)))
        floor = colorsys.hsv_to_rgb(rng.uniform(0.05, 0.12), rng.uniform(0.4, 0.6), rng.uniform(0.35, 0.55))
        walls = tuple(tuple(float(c) for c in colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.05, 0.2),
                                                                   rng.uniform(0.75, 0.95))) for _ in range(4))
        return cls(seed, tuple(objects), floor_color=tuple(float(c) for c in floor), wall_colors=walls, **kw)


@dataclass(frozen=True)
class ViewSpec:
    num_views: int = 8
    radius: float = 1.6
    height: float = 1.3
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.45)
    fov_deg: float = 60.0
    step_deg: float = 20.0
    jitter: float = 0.05
    image_size: int = 64

    def __post_init__(self):
        if self.num_views < 3:
            raise ValueError("need at least 3 views for a context pair plus target")


def triplet(start: int, gap: int = 2) -> tuple[tuple[int, int], int]:
    """Context pair ``(start, start + gap)`` and the target between them."""
    if gap < 2:
        raise ValueError("context views must leave room for a target in between")
    return (start, start + gap), start + gap // 2


# --------------------------------------------------------------------------- #
#                           Surface sampling                                  #
# --------------------------------------------------------------------------- #

def _frame_quat(normal: np.ndarray) -> np.ndarray:
    """Quaternion rotating local +z onto ``normal``."""
    n = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return rotmat_to_quat(np.stack([t1, t2, n], axis=1))


def _discs(points, normals, radius, thickness):
    quats = np.stack([_frame_quat(n) for n in normals]) if len(points) else np.zeros((0, 4))
    scales = np.tile([radius, radius, thickness], (len(points), 1))
    return np.asarray(points), quats, scales


def _texture(points: np.ndarray, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Smooth multiplicative brightness pattern in world coordinates."""
    out = np.zeros(len(points))
    for _ in range(3):
        k = rng.normal(size=3)
        k *= rng.uniform(2.0, 6.0) / np.linalg.norm(k)
        out += np.sin(points @ k + rng.uniform(0, 2 * np.pi))
    return 1.0 + amplitude * out / 3.0


def _grid(u_len, v_len, spacing, rng):
    nu, nv = max(1, int(round(u_len / spacing))), max(1, int(round(v_len / spacing)))
    u = (np.arange(nu) + 0.5) / nu * u_len
    v = (np.arange(nv) + 0.5) / nv * v_len
    uu, vv = np.meshgrid(u, v, indexing="ij")
    jit = rng.uniform(-0.15, 0.15, (2, nu, nv)) * spacing
    return (uu + jit[0]).ravel(), (vv + jit[1]).ravel(), max(u_len / nu, v_len / nv)


def _shell(spec: SceneSpec, rng):
    E, Hw, sp = spec.room_half_extent, spec.wall_height, spec.shell_spacing
    parts = []
    u, v, step = _grid(2 * E, 2 * E, sp, rng)
    pts = np.stack([u - E, v - E, np.zeros_like(u)], axis=1)
    parts.append((pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1)), step, spec.floor_label, spec.floor_color))
    # walls: +x, -x, +y, -y with inward normals
    walls = [((E, 0), (-1.0, 0.0)), ((-E, 0), (1.0, 0.0)), ((0, E), (0.0, -1.0)), ((0, -E), (0.0, 1.0))]
    wall_colors = spec.wall_colors or ((0.85, 0.85, 0.8),) * 4
    for k, ((ox, oy), (nx, ny)) in enumerate(walls):
        u, v, step = _grid(2 * E, Hw, sp, rng)
        t = u - E
        if nx != 0:
            pts = np.stack([np.full_like(t, ox), t, v], axis=1)
        else:
            pts = np.stack([t, np.full_like(t, oy), v], axis=1)
        parts.append((pts, np.tile([nx, ny, 0.0], (len(pts), 1)), step, spec.wall_labels()[k], wall_colors[k]))
    return parts


def _box(center_xy, yaw, size, n, rng):
    sx, sy, sz = size
    faces = [  # (origin, u axis, v axis, normal) in the box frame; no bottom face
        ((-sx / 2, -sy / 2, sz), (sx, 0, 0), (0, sy, 0), (0, 0, 1)),
        ((sx / 2, -sy / 2, 0), (0, sy, 0), (0, 0, sz), (1, 0, 0)),
        ((-sx / 2, -sy / 2, 0), (0, sy, 0), (0, 0, sz), (-1, 0, 0)),
        ((-sx / 2, sy / 2, 0), (sx, 0, 0), (0, 0, sz), (0, 1, 0)),
        ((-sx / 2, -sy / 2, 0), (sx, 0, 0), (0, 0, sz), (0, -1, 0)),
    ]
    area = sx * sy + 2 * sy * sz + 2 * sx * sz
    spacing = np.sqrt(area / n)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    pts, nrm = [], []
    step = spacing
    for o, ua, va, nn in faces:
        ua, va = np.asarray(ua, float), np.asarray(va, float)
        u, v, st = _grid(np.linalg.norm(ua), np.linalg.norm(va), spacing, rng)
        step = max(step, st)
        p = np.asarray(o) + np.outer(u / np.linalg.norm(ua), ua) + np.outer(v / np.linalg.norm(va), va)
        pts.append(p)
        nrm.append(np.tile(nn, (len(p), 1)))
    pts = np.concatenate(pts) @ R.T + np.array([center_xy[0], center_xy[1], 0.0])
    nrm = np.concatenate(nrm).astype(float) @ R.T
    return pts, nrm, step


def _ellipsoids(center_xy, radius, n, rng):
    k = int(rng.integers(2, 4))
    pts, nrm = [], []
    total_area = 0.0
    blobs = []
    for _ in range(k):
        axes = rng.uniform(0.12, 0.28, 3) * (radius / 0.45)
        off = np.append(rng.uniform(-0.5, 0.5, 2) * radius, 0.0)
        center = np.array([center_xy[0], center_xy[1], axes[2] + rng.uniform(0.0, 0.35)]) + off
        blobs.append((center, axes))
        total_area += 4 * np.pi * (np.prod(axes) ** (2 / 3))
    for center, axes in blobs:
        area = 4 * np.pi * (np.prod(axes) ** (2 / 3))
        m = max(8, int(round(n * area / total_area)))
        i = np.arange(m) + 0.5
        phi = np.arccos(1 - 2 * i / m)
        theta = np.pi * (1 + 5 ** 0.5) * i
        unit = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        pts.append(center + unit * axes)
        g = unit / axes
        nrm.append(g / np.linalg.norm(g, axis=1, keepdims=True))
    pts, nrm = np.concatenate(pts), np.concatenate(nrm)
    keep = pts[:, 2] > 0.0
    spacing = np.sqrt(total_area / n)
    return pts[keep], nrm[keep], spacing


def _place(rng, radii, limit):
    centers = []
    for r in radii:
        for _ in range(500):
            c = rng.uniform(-limit, limit, 2)
            if np.linalg.norm(c) + r > limit + 0.35:
                continue
            if all(np.linalg.norm(c - c2) > r + r2 + 0.05 for c2, r2 in zip(centers, radii)):
                centers.append(c)
                break
        else:
            centers.append(rng.uniform(-limit, limit, 2))
    return centers


def generate_scene(spec: SceneSpec) -> tuple[GaussianCloud, SceneSpec]:
    """Deterministic Gaussian cloud (RGB features) for ``spec``."""
    rng = np.random.default_rng([spec.seed, 1])
    parts = _shell(spec, rng)
    radii = [float(rng.uniform(0.25, 0.42)) for _ in spec.objects]
    centers = _place(rng, radii, 0.85)
    for obj, c, r in zip(spec.objects, centers, radii):
        if obj.kind == "box":
            side = r * np.sqrt(2)
            size = (rng.uniform(0.7, 1.0) * side, rng.uniform(0.7, 1.0) * side, rng.uniform(0.3, 0.9))
            pts, nrm, step = _box(c, rng.uniform(0, np.pi), size, spec.gaussians_per_object, rng)
        else:
            pts, nrm, step = _ellipsoids(c, r, spec.gaussians_per_object, rng)
        parts.append((pts, nrm, step, obj.label, obj.color))

    means, quats, scales, opac, cols, labels = [], [], [], [], [], []
    shell_labels = set(spec.labels()) - {o.label for o in spec.objects}
    for pts, nrm, step, label, color in parts:
        p, q, s = _discs(pts, nrm, 0.75 * step, 0.1 * 0.75 * step)
        tex = _texture(p, rng, spec.texture_amplitude)
        means.append(p)
        quats.append(q)
        scales.append(s)
        opac.append(np.full(len(p), SHELL_OPACITY if label in shell_labels else OBJECT_OPACITY))
        cols.append(np.clip(np.asarray(color)[None, :] * tex[:, None], 0.0, 1.0))
        labels.append(np.full(len(p), label))
    cloud = GaussianCloud(np.concatenate(means), np.concatenate(quats), np.concatenate(scales),
                          np.concatenate(opac), np.concatenate(cols), np.concatenate(labels))
    return cloud, spec


def ring_cameras(seed: int, vs: ViewSpec) -> list[Camera]:
    """``num_views`` cameras on an arc around the room center, looking inward."""
    rng = np.random.default_rng([seed, 2])
    start = rng.uniform(0, 2 * np.pi)
    cams = []
    for k in range(vs.num_views):
        ang = start + np.deg2rad(vs.step_deg) * k
        eye = np.array([vs.radius * np.cos(ang), vs.radius * np.sin(ang), vs.height]) + rng.uniform(-1, 1, 3) * vs.jitter
        target = np.asarray(vs.look_at) + rng.uniform(-1, 1, 3) * vs.jitter
        cams.append(Camera.from_fov(vs.fov_deg, vs.image_size, vs.image_size, look_at(eye, target)))
    return cams


def render_groundtruth(scene: GaussianCloud, cam: Camera):
    """Color image ``(H, W, 3)``, expected depth ``(H, W, 1)`` and instance mask ``(H, W)``.

    Pixels whose accumulated alpha is below 0.5 are background: depth 0,
    label 0. Labels come from the largest per-label accumulated alpha.
    """
    labels = np.unique(scene.labels)
    onehot = (scene.labels[:, None] == labels[None, :]).astype(np.float64)
    cam_z = cam.pose.apply(scene.means)[:, 2]
    feats = np.concatenate([scene.features[:, :3], cam_z[:, None], onehot], axis=1)
    out = render(scene.with_features(feats), cam)
    alpha = out.alpha[..., 0]
    color = out.features[..., :3]
    fg = alpha >= 0.5
    depth = np.zeros(alpha.shape)
    depth[fg] = out.features[..., 3][fg] / alpha[fg]
    mask = np.zeros(alpha.shape, dtype=np.int64)
    if labels.size:
        mask[fg] = labels[np.argmax(out.features[..., 4:], axis=-1)][fg]
    return color, depth[..., None], mask


@dataclass
class SceneData:
    """A generated scene with its cameras and ground-truth views."""

    spec: SceneSpec
    cloud: GaussianCloud
    views: list[ContextView] = field(default_factory=list)

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    def class_mask(self, k: int) -> np.ndarray:
        lut = self.spec.label_classes()
        m = self.views[k].mask
        out = np.zeros_like(m)
        for lab, cls in lut.items():
            out[m == lab] = cls
        return out


def build_scene(spec: SceneSpec, vs: ViewSpec = ViewSpec()) -> SceneData:
    cloud, _ = generate_scene(spec)
    return build_scene_from_cloud(spec, cloud, vs)


def build_scene_from_cloud(spec: SceneSpec, cloud: GaussianCloud, vs: ViewSpec = ViewSpec()) -> SceneData:
    """Render the ground-truth views of an existing cloud."""
    views = []
    for cam in ring_cameras(spec.seed, vs):
        color, depth, mask = render_groundtruth(cloud, cam)
        views.append(ContextView(color, cam, depth, mask))
    return SceneData(spec, cloud, views)
