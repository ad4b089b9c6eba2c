"""Binary tensor and checkpoint files, scene JSON, probe report lines.

Tensor file ``SNDT``: magic, u32 version, u32 ndim, u32 dims, f64 payload.
Checkpoint ``SNDC``: magic, u32 version, u32 length + canonical-JSON config,
u32 segment count, then per segment u32 name length, UTF-8 name, u64
value count, f64 values. All integers and floats little-endian.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from ..distill.model import ModelParams, param_layout
from ..geometry import GaussianCloud
from ..metrics import ProbeReport
from ..synth import SceneData, SceneSpec, ViewSpec, build_scene_from_cloud
from .config import RunConfig, canonical_json

TENSOR_MAGIC = b"SNDT"
CHECKPOINT_MAGIC = b"SNDC"
FORMAT_VERSION = 1
F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


class TruncatedError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.what}: truncated at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=F64).astype(np.float64)

    def header(self, magic: bytes):
        got = self.take(4)
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        version = self.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.what}: unsupported version {version}")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


# --------------------------------------------------------------------------- #
#                                 Tensors                                     #
# --------------------------------------------------------------------------- #

def tensor_bytes(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 0 or 0 in a.shape:
        raise FormatError("tensor dims must be non-empty and positive")
    head = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=F64).tobytes()


def tensor_from_bytes(data: bytes, what: str = "tensor") -> np.ndarray:
    r = _Reader(data, what)
    r.header(TENSOR_MAGIC)
    ndim = r.u32()
    if ndim == 0:
        raise FormatError(f"{what}: empty dims")
    dims = [r.u32() for _ in range(ndim)]
    if 0 in dims:
        raise FormatError(f"{what}: zero-length dimension in {dims}")
    out = r.f64(math.prod(dims)).reshape(dims)
    r.done()
    return out


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------- #
#                               Checkpoints                                   #
# --------------------------------------------------------------------------- #

def checkpoint_bytes(config: RunConfig, segments: dict[str, np.ndarray]) -> bytes:
    blob = config.canonical_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(segments))]
    for name, values in segments.items():
        raw = name.encode("utf-8")
        vals = np.ascontiguousarray(np.asarray(values, dtype=np.float64).ravel(), dtype=F64)
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", vals.size), vals.tobytes()]
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes, what: str = "checkpoint") -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data, what)
    r.header(CHECKPOINT_MAGIC)
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: corrupt config blob") from exc
    segments = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        segments[name] = r.f64(r.u64())
    r.done()
    return config, segments


def state_segments(state) -> dict[str, np.ndarray]:
    """Flatten a training state into named f64 segments."""
    seg = {}
    for prefix, params in (("student", state.student), ("teacher", state.teacher)):
        for name in params.names():
            seg[f"{prefix}/{name}"] = params[name]
    seg["optim/m"] = state.m
    seg["optim/v"] = state.v
    seg["meta/step"] = np.array([float(state.step)])
    seg["meta/seed"] = np.array([float(state.seed)])
    return seg


def write_checkpoint(path: str | Path, config: RunConfig, state) -> str:
    """Write and return the SHA-256 of the file contents."""
    data = checkpoint_bytes(config, state_segments(state))
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path: str | Path):
    """Return ``(RunConfig, TrainState)``."""
    from ..distill.train import TrainState

    raw, seg = checkpoint_from_bytes(Path(path).read_bytes(), str(path))
    config = RunConfig.from_dict(raw)
    layout = param_layout(config.encoder, config.head)

    def params(prefix):
        p = ModelParams(layout)
        for name, shape in layout.items():
            key = f"{prefix}/{name}"
            if key not in seg:
                raise FormatError(f"{path}: missing segment {key}")
            if seg[key].size != math.prod(shape):
                raise FormatError(f"{path}: segment {key} has {seg[key].size} values, layout wants {math.prod(shape)}")
            p[name][...] = seg[key].reshape(shape)
        return p

    student, teacher = params("student"), params("teacher")
    for key in ("optim/m", "optim/v", "meta/step", "meta/seed"):
        if key not in seg:
            raise FormatError(f"{path}: missing segment {key}")
    state = TrainState(student, teacher, int(seg["meta/step"][0]), seg["optim/m"].copy(), seg["optim/v"].copy(),
                       int(seg["meta/seed"][0]))
    return config, state


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------- #
#                                 Scenes                                      #
# --------------------------------------------------------------------------- #

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            raise FormatError("non-finite float in scene")
        return format(float(x), ".17g")
    if isinstance(x, str):
        return json.dumps(x, ensure_ascii=False)
    if x is None:
        return "null"
    if isinstance(x, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in sorted(x.items())) + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def scene_json(data: SceneData, views: ViewSpec) -> str:
    """Scene spec, view ring and Gaussian records; floats keep 17 significant digits."""
    c = data.cloud
    gaussians = [
        {"mean": c.means[k], "quaternion": c.quats[k], "scale": c.scales[k], "opacity": c.opacities[k],
         "color": c.features[k, :3], "label": c.labels[k]}
        for k in range(len(c))
    ]
    from dataclasses import asdict
    return _fmt({"spec": data.spec.to_dict(), "views": asdict(views), "gaussians": gaussians})


def save_scene(path: str | Path, data: SceneData, views: ViewSpec) -> None:
    Path(path).write_text(scene_json(data, views), encoding="utf-8")


def load_scene(path: str | Path) -> SceneData:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        spec = SceneSpec.from_dict(d["spec"])
        v = dict(d["views"])
        v["look_at"] = tuple(v["look_at"])
        views = ViewSpec(**v)
        g = d["gaussians"]
        cloud = GaussianCloud(
            np.array([x["mean"] for x in g], dtype=np.float64).reshape(-1, 3),
            np.array([x["quaternion"] for x in g], dtype=np.float64).reshape(-1, 4),
            np.array([x["scale"] for x in g], dtype=np.float64).reshape(-1, 3),
            np.array([x["opacity"] for x in g], dtype=np.float64),
            np.array([x["color"] for x in g], dtype=np.float64).reshape(-1, 3),
            np.array([x["label"] for x in g], dtype=np.int64),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed scene file ({exc})") from exc
    return build_scene_from_cloud(spec, cloud, views)


# --------------------------------------------------------------------------- #
#                              Probe reports                                  #
# --------------------------------------------------------------------------- #

def write_reports(path: str | Path, reports, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path: str | Path) -> list[ProbeReport]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(ProbeReport(**json.loads(line)))
    return out


def append_jsonl(path: str | Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(canonical_json(record) + "\n")
