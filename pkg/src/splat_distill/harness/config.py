"""Run configuration: one validated, JSON-serializable record per run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..distill.model import EncoderConfig, HeadConfig
from ..distill.train import TrainSettings

# toggles an ablation pins; every other row uses the full-model value
FULL_TOGGLES = {"blend": True, "upscale": "mask", "loss": "distill", "teacher": "ema", "target": "novel"}
ABLATIONS = {
    "full": {},
    "A": {"blend": False},
    "B": {"upscale": "bilinear"},
    "C": {"loss": "cosine"},
    "D": {"teacher": "frozen"},
    "E": {"target": "context"},
    "G": {"loss": "mse", "teacher": "frozen"},
    "H": {"teacher": "frozen", "upscale": "bilinear", "blend": False},
}
ABLATION_LABELS = {
    "A": "Without Blending (A)",
    "B": "Bilinear instead of Masked Upscaling (B)",
    "C": "Cosine Loss instead of Distillation Loss (C)",
    "D": "Frozen instead of Learnable Teacher (D)",
    "E": "Context instead of Novel Views (E)",
    "G": "Feature Rendering Loss (G)",
    "H": "Basic Variant (H)",
    "full": "Full configuration",
}
CHOICES = {
    "upscale": ("mask", "bilinear"),
    "loss": ("distill", "cosine", "mse"),
    "teacher": ("ema", "frozen"),
    "target": ("novel", "context"),
    "head_mode": ("shared", "ema"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    train_scenes: int = 20
    eval_scenes: int = 5
    train_scene_seed: int = 0
    eval_scene_seed: int = 1000
    num_objects: int = 4
    num_views: int = 8
    steps: int = 3000
    checkpoint_every: int = 1000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    tau_s: float = 0.1
    tau_t: float = 0.07
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    ema_momentum: float = 0.999
    ema_every: int = 10
    head_mode: str = "ema"
    ablation: str = "full"
    blend: bool = True
    blend_alpha: float = 0.5
    blend_alpha_weighted: bool = False
    upscale: str = "mask"
    loss: str = "distill"
    teacher: str = "ema"
    target: str = "novel"
    context_gap: int = 2
    stride: int = 1
    ridge_lambda: float = 1e-3
    seg_l2: float = 1e-3
    threshold_px: float = 10.0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {sorted(ABLATIONS)}")
        for key, allowed in CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        expected = {**FULL_TOGGLES, **ABLATIONS[self.ablation]}
        clash = {k: getattr(self, k) for k, v in expected.items() if getattr(self, k) != v}
        if clash:
            raise ConfigError(f"ablation {self.ablation} requires {expected}; conflicting toggles {clash}")
        for name in ("train_scenes", "num_objects", "steps", "ema_every", "stride", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.eval_scenes < 2:
            raise ConfigError("eval_scenes must be at least 2 (probes fit on some, score on the rest)")
        if not 3 <= self.num_views:
            raise ConfigError("num_views must be at least 3")
        if not 2 <= self.context_gap < self.num_views:
            raise ConfigError("context_gap must lie in [2, num_views)")
        if not (self.tau_s > 0 and self.tau_t > 0):
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0 or not 0.0 <= self.blend_alpha <= 1.0:
            raise ConfigError("ema_momentum and blend_alpha must lie in [0, 1]")
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if not (self.ridge_lambda > 0 and self.seg_l2 >= 0 and self.threshold_px > 0):
            raise ConfigError("ridge_lambda and threshold_px must be positive, seg_l2 non-negative")
        if self.encoder.channels_in != 3:
            raise ConfigError("encoder.channels_in must be 3 (RGB input)")

    # ------------------------------------------------------------------ #

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        # an ablation fills in the toggles it pins unless they are given explicitly
        ablation = d.get("ablation", "full")
        if ablation in ABLATIONS:
            for k, v in {**FULL_TOGGLES, **ABLATIONS[ablation]}.items():
                d.setdefault(k, v)
        if "encoder" in d:
            d["encoder"] = _sub(EncoderConfig, d["encoder"], "encoder")
        if "head" in d:
            d["head"] = _sub(HeadConfig, d["head"], "head")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        _check_types(cls, d)
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
        return replace(self, ablation=name, **{**FULL_TOGGLES, **ABLATIONS[name]})

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            encoder=self.encoder, head=self.head, tau_s=self.tau_s, tau_t=self.tau_t, lr=self.lr,
            betas=tuple(self.betas), weight_decay=self.weight_decay, ema_momentum=self.ema_momentum,
            ema_every=self.ema_every, teacher=self.teacher, head_mode=self.head_mode, upscale=self.upscale,
            blend=self.blend, blend_alpha=self.blend_alpha, blend_alpha_weighted=self.blend_alpha_weighted,
            loss=self.loss, target=self.target, context_gap=self.context_gap, stride=self.stride,
        )

    @property
    def train_seeds(self) -> list[int]:
        return list(range(self.train_scene_seed, self.train_scene_seed + self.train_scenes))

    @property
    def eval_seeds(self) -> list[int]:
        return list(range(self.eval_scene_seed, self.eval_scene_seed + self.eval_scenes))


def _sub(cls, value, name):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = sorted(set(value) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown {name} keys: {unknown}")
    _check_types(cls, value, prefix=f"{name}.")
    try:
        return cls(**value)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


_SCALAR_TYPES = {"int": int, "float": (int, float), "bool": bool, "str": str}


def _check_types(cls, d: dict, prefix: str = ""):
    for f in fields(cls):
        if f.name not in d:
            continue
        want = _SCALAR_TYPES.get(f.type if isinstance(f.type, str) else getattr(f.type, "__name__", ""))
        if want is None:
            continue
        v = d[f.name]
        # bool is an int subclass; keep the two apart
        if (want is int and (isinstance(v, bool) or not isinstance(v, int))) or \
                (want is bool and not isinstance(v, bool)) or \
                (want == (int, float) and (isinstance(v, bool) or not isinstance(v, (int, float)))) or \
                (want is str and not isinstance(v, str)):
            raise ConfigError(f"{prefix}{f.name} has the wrong type ({type(v).__name__})")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)
