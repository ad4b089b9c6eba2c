"""Toy patch encoder and DINO-style prototype head with hand-written backprop.

Both networks read their weights out of one flat :class:`ModelParams`
vector so optimizer and EMA updates are plain vector arithmetic.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
NORM_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    channels_in: int = 3
    embed_dim: int = 32
    hidden_dim: int = 64
    pos_embed: bool = True
    pos_std: float = 0.1

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels_in, self.embed_dim, self.hidden_dim) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.image_size % self.patch_size:
            raise ValueError("patch size must divide the image size")
        if self.pos_std < 0:
            raise ValueError("pos_std must be non-negative")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels_in


@dataclass(frozen=True)
class HeadConfig:
    # full-scale DINO head: hidden 2048, bottleneck 256, 65536 prototypes
    layers: int = 3
    hidden: int = 64
    bottleneck: int = 16
    prototypes: int = 256

    def __post_init__(self):
        if min(self.hidden, self.bottleneck, self.prototypes) < 1:
            raise ValueError("head dimensions must be positive")
        if self.layers != 3:
            raise ValueError("only the 3-layer head is implemented")


def param_layout(enc: EncoderConfig, head: HeadConfig) -> dict[str, tuple[int, ...]]:
    """Ordered segment shapes of the flat parameter vector."""
    C, Hd, P = enc.embed_dim, enc.hidden_dim, enc.patch_dim
    shapes = {"embed.w": (P, C), "embed.b": (C,)}
    if enc.pos_embed:
        shapes["embed.pos"] = (enc.tokens, C)
    shapes.update({
        "mlp.w1": (C, Hd), "mlp.b1": (Hd,), "mlp.w2": (Hd, C), "mlp.b2": (C,),
        "head.w1": (C, head.hidden), "head.b1": (head.hidden,),
        "head.w2": (head.hidden, head.hidden), "head.b2": (head.hidden,),
        "head.w3": (head.hidden, head.bottleneck), "head.b3": (head.bottleneck,),
        "head.proto": (head.bottleneck, head.prototypes),
    })
    return shapes


class ModelParams:
    """Flat float64 vector plus a named segment map."""

    def __init__(self, layout: Mapping[str, tuple[int, ...]], vector: np.ndarray | None = None):
        self.layout = {k: tuple(v) for k, v in layout.items()}
        self.offsets = {}
        off = 0
        for name, shape in self.layout.items():
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size)
            off += size
        self.size = off
        if vector is None:
            vector = np.zeros(off)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (off,):
            raise ValueError(f"vector of length {vector.size} does not match layout size {off}")
        self.vector = vector

    def __getitem__(self, name: str) -> np.ndarray:
        a, b = self.offsets[name]
        return self.vector[a:b].reshape(self.layout[name])

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def names(self):
        return list(self.layout)

    def copy(self) -> "ModelParams":
        return ModelParams(self.layout, self.vector.copy())

    def like(self, vector: np.ndarray) -> "ModelParams":
        return ModelParams(self.layout, vector)

    def same_layout(self, other: "ModelParams") -> bool:
        return list(self.layout.items()) == list(other.layout.items())

    def segment_of(self, flat_index: int) -> str:
        for name, (a, b) in self.offsets.items():
            if a <= flat_index < b:
                return name
        raise IndexError(flat_index)

    def __repr__(self):
        return f"ModelParams({len(self.layout)} segments, {self.size} values)"


def init_params(enc: EncoderConfig, head: HeadConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in scaled normal weights, zero biases."""
    params = ModelParams(param_layout(enc, head))
    for name, shape in params.layout.items():
        if name.split(".")[-1].startswith("b"):
            continue
        if name == "embed.pos":
            params[name][...] = enc.pos_std * rng.standard_normal(shape)
        else:
            params[name][...] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


# --------------------------------------------------------------------------- #
#                              Building blocks                                #
# --------------------------------------------------------------------------- #

def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """``(H, W, c) -> (tokens, p*p*c)``, tokens row-major, pixels (row, col, channel) within a patch."""
    H, W, c = image.shape
    h, w = H // p, W // p
    return image.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * c)


def encode(params: ModelParams, image: np.ndarray, enc: EncoderConfig, cache: dict | None = None) -> np.ndarray:
    """Patch embed, then a residual per-token GELU MLP. Returns ``(h, w, C)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (enc.image_size, enc.image_size, enc.channels_in):
        raise ValueError(f"image of shape {image.shape} does not match encoder input "
                         f"{(enc.image_size, enc.image_size, enc.channels_in)}")
    patches = patchify(image, enc.patch_size)
    x = patches @ params["embed.w"] + params["embed.b"]
    if enc.pos_embed:
        x = x + params["embed.pos"]
    a = x @ params["mlp.w1"] + params["mlp.b1"]
    g = gelu(a)
    y = x + g @ params["mlp.w2"] + params["mlp.b2"]
    if cache is not None:
        cache.update(patches=patches, x=x, a=a, g=g)
    return y.reshape(enc.grid, enc.grid, enc.embed_dim)


def head_logits(params: ModelParams, features: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """3-layer MLP, L2-normalized bottleneck, prototype inner products: ``(tokens, prototypes)``."""
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(-1, f.shape[-1])
    a1 = f @ params["head.w1"] + params["head.b1"]
    h1 = gelu(a1)
    a2 = h1 @ params["head.w2"] + params["head.b2"]
    h2 = gelu(a2)
    z = h2 @ params["head.w3"] + params["head.b3"]
    n = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_EPS)
    zn = z / n
    logits = zn @ params["head.proto"]
    if cache is not None:
        cache.update(f=f, a1=a1, h1=h1, a2=a2, h2=h2, z=z, n=n, zn=zn)
    return logits


def head_backward(params: ModelParams, cache: dict, d_logits: np.ndarray, grad: ModelParams) -> np.ndarray:
    """Accumulate head gradients into ``grad``; return d(loss)/d(features) as ``(tokens, C)``."""
    zn, n = cache["zn"], cache["n"]
    grad["head.proto"][...] += zn.T @ d_logits
    d_zn = d_logits @ params["head.proto"].T
    d_z = (d_zn - zn * np.sum(zn * d_zn, axis=1, keepdims=True)) / n
    grad["head.w3"][...] += cache["h2"].T @ d_z
    grad["head.b3"][...] += d_z.sum(axis=0)
    d_a2 = (d_z @ params["head.w3"].T) * gelu_grad(cache["a2"])
    grad["head.w2"][...] += cache["h1"].T @ d_a2
    grad["head.b2"][...] += d_a2.sum(axis=0)
    d_a1 = (d_a2 @ params["head.w2"].T) * gelu_grad(cache["a1"])
    grad["head.w1"][...] += cache["f"].T @ d_a1
    grad["head.b1"][...] += d_a1.sum(axis=0)
    return d_a1 @ params["head.w1"].T


def encode_backward(params: ModelParams, cache: dict, d_y: np.ndarray, grad: ModelParams, enc: EncoderConfig) -> None:
    """Accumulate encoder gradients into ``grad`` given d(loss)/d(output) as ``(tokens, C)``."""
    d_y = d_y.reshape(-1, enc.embed_dim)
    grad["mlp.w2"][...] += cache["g"].T @ d_y
    grad["mlp.b2"][...] += d_y.sum(axis=0)
    d_a = (d_y @ params["mlp.w2"].T) * gelu_grad(cache["a"])
    grad["mlp.w1"][...] += cache["x"].T @ d_a
    grad["mlp.b1"][...] += d_a.sum(axis=0)
    d_x = d_y + d_a @ params["mlp.w1"].T
    if enc.pos_embed:
        grad["embed.pos"][...] += d_x
    grad["embed.w"][...] += cache["patches"].T @ d_x
    grad["embed.b"][...] += d_x.sum(axis=0)


def config_dict(enc: EncoderConfig, head: HeadConfig) -> dict:
    return {"encoder": asdict(enc), "head": asdict(head)}
