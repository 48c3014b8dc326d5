"""3D-ViT backbone and projector head.

A cloud is split into ``S = N // k_patch`` patches (FPS centroids, each with
its ``k_patch`` nearest neighbours). Every patch is embedded by a shared
per-point MLP followed by a max-pool, a learnable class token is prepended,
and the sequence runs through pre-norm transformer blocks. The final class
token is the backbone feature; the projector maps it to ``K`` logits.

Everything here is batched over a leading axis of clouds with equal point
counts. Parameters are passed around as ``dict[str, Tensor]`` so the same code
serves the student (tensors on a tape) and the teacher (plain tensors).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_arrays, write_arrays
from .geometry import _rng, fps, knn_many


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    k_patch: int = 32
    dim: int = 128
    depth: int = 4
    heads: int = 8
    mlp_hidden: int = 256
    out_dim: int = 128
    proj_hidden: int = 512
    embed_hidden: int = 64
    centroid_channels: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                raise ValueError(f"BackboneConfig.{f.name} must be positive, got {v}")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        """Loss dimension as used for full-scale pretraining."""
        return cls(out_dim=512)

    @property
    def in_channels(self) -> int:
        return 6 if self.centroid_channels else 3

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Ordered collection of named parameter arrays for one network."""

    def __init__(self, config: BackboneConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def same_shapes(self, other: "ModelParams") -> bool:
        return (list(self.arrays) == list(other.arrays)
                and all(self[k].shape == other[k].shape for k in self.arrays))

    def save(self, path, meta: dict | None = None) -> None:
        write_arrays(path, self.arrays, {"kind": "backbone", "config": self.config.to_dict(),
                                         **(meta or {})})

    @classmethod
    def load(cls, path, prefix: str = "") -> "ModelParams":
        arrays, meta = read_arrays(path)
        config = BackboneConfig(**meta["config"] if "config" in meta else meta["backbone"])
        picked = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        return cls(config, picked)


def init_params(config: BackboneConfig, seed=None) -> ModelParams:
    """Random initialisation: fan-in scaled MLPs, small-normal transformer weights."""
    rng = _rng(seed)
    D = config.dim

    def dense(fan_in, fan_out, std=None):
        std = 1.0 / math.sqrt(fan_in) if std is None else std
        return rng.normal(0.0, std, size=(fan_in, fan_out))

    p: dict[str, np.ndarray] = {}
    p["embed.fc1.w"] = dense(config.in_channels, config.embed_hidden)
    p["embed.fc1.b"] = np.zeros(config.embed_hidden)
    p["embed.fc2.w"] = dense(config.embed_hidden, D)
    p["embed.fc2.b"] = np.zeros(D)
    p["cls_token"] = rng.normal(0.0, 0.02, size=(1, D))
    for i in range(config.depth):
        b = f"blocks.{i}."
        p[b + "ln1.g"], p[b + "ln1.b"] = np.ones(D), np.zeros(D)
        p[b + "attn.qkv.w"] = dense(D, 3 * D, 0.02)
        p[b + "attn.qkv.b"] = np.zeros(3 * D)
        p[b + "attn.proj.w"] = dense(D, D, 0.02)
        p[b + "attn.proj.b"] = np.zeros(D)
        p[b + "ln2.g"], p[b + "ln2.b"] = np.ones(D), np.zeros(D)
        p[b + "mlp.fc1.w"] = dense(D, config.mlp_hidden, 0.02)
        p[b + "mlp.fc1.b"] = np.zeros(config.mlp_hidden)
        p[b + "mlp.fc2.w"] = dense(config.mlp_hidden, D, 0.02)
        p[b + "mlp.fc2.b"] = np.zeros(D)
    p["norm.g"], p["norm.b"] = np.ones(D), np.zeros(D)
    h = config.proj_hidden
    p["proj.fc1.w"], p["proj.fc1.b"] = dense(D, h), np.zeros(h)
    p["proj.fc2.w"], p["proj.fc2.b"] = dense(h, h), np.zeros(h)
    p["proj.fc3.w"], p["proj.fc3.b"] = dense(h, config.out_dim), np.zeros(config.out_dim)
    return ModelParams(config, p)


# patching ------------------------------------------------------------------

@dataclass
class Patches:
    """Patch grouping of one cloud: ``index[i]`` are the member points of patch ``i``."""

    centroids: np.ndarray   # (S, 3)
    index: np.ndarray       # (S, k)
    points: np.ndarray      # (S, k, 3), re-centred on each centroid


def patchify(points: np.ndarray, k_patch: int, seed=None) -> Patches:
    n = len(points)
    if n < k_patch:
        raise DegenerateInputError(f"cloud has {n} points, fewer than k_patch={k_patch}")
    centroid_idx = fps(points, n // k_patch, seed)
    centroids = points[centroid_idx]
    index = knn_many(points, centroids, k_patch)
    return Patches(centroids, index, points[index] - centroids[:, None, :])


def patch_inputs(patches: Patches, centroid_channels: bool = True) -> np.ndarray:
    """Per-point MLP input: re-centred xyz, optionally followed by the centroid xyz."""
    if not centroid_channels:
        return patches.points
    c = np.broadcast_to(patches.centroids[:, None, :], patches.points.shape)
    return np.concatenate([patches.points, c], axis=-1)


def batch_patch_inputs(clouds, config: BackboneConfig, seed=None) -> tuple[np.ndarray, list[Patches]]:
    """Patchify equally sized clouds and stack their inputs into ``(B, S, k, C)``."""
    rng = _rng(seed)
    groups = [patchify(np.asarray(c), config.k_patch, rng) for c in clouds]
    return np.stack([patch_inputs(g, config.centroid_channels) for g in groups]), groups


# network -------------------------------------------------------------------

def linear(x: Tensor, P: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, P[name + ".w"]), P[name + ".b"])


def embed_patches(inputs, P: dict[str, Tensor]) -> Tensor:
    """``(..., S, k, C)`` patch inputs to ``(..., S, D)`` tokens via MLP + max-pool."""
    h = ad.gelu(linear(ad.as_tensor(inputs), P, "embed.fc1"))
    h = linear(h, P, "embed.fc2")
    return ad.max_over_axis(h, axis=-2)


def attention(x: Tensor, P: dict[str, Tensor], prefix: str, heads: int) -> tuple[Tensor, np.ndarray]:
    B, T, D = x.shape
    dh = D // heads
    qkv = ad.reshape(linear(x, P, prefix + ".qkv"), (B, T, 3, heads, dh))
    qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))          # (3, B, H, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.scalar_multiply(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    out = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3))
    out = linear(ad.reshape(out, (B, T, D)), P, prefix + ".proj")
    return out, probs.data


def encode(tokens: Tensor, P: dict[str, Tensor], config: BackboneConfig) -> tuple[Tensor, np.ndarray]:
    """Run the transformer over ``[class, tokens]``.

    Returns the class-token feature ``(B, D)`` and attention probabilities
    ``(B, L, heads, S + 1, S + 1)``.
    """
    B, S, D = tokens.shape
    cls = ad.broadcast_to(P["cls_token"], (B, 1, D))
    x = ad.concat([cls, tokens], axis=1)
    maps = []
    for i in range(config.depth):
        b = f"blocks.{i}."
        h = ad.layer_norm(x, P[b + "ln1.g"], P[b + "ln1.b"])
        a, probs = attention(h, P, b + "attn", config.heads)
        maps.append(probs)
        x = ad.add(x, a)
        h = ad.layer_norm(x, P[b + "ln2.g"], P[b + "ln2.b"])
        h = ad.gelu(linear(h, P, b + "mlp.fc1"))
        x = ad.add(x, linear(h, P, b + "mlp.fc2"))
    x = ad.layer_norm(x, P["norm.g"], P["norm.b"])
    feature = x[:, 0, :]
    return feature, np.stack(maps, axis=1)


def project(feature, P: dict[str, Tensor]) -> Tensor:
    """Three-layer GELU MLP from backbone feature to ``K`` unnormalised logits."""
    h = ad.gelu(linear(ad.as_tensor(feature), P, "proj.fc1"))
    h = ad.gelu(linear(h, P, "proj.fc2"))
    return linear(h, P, "proj.fc3")


def forward_inputs(inputs: np.ndarray, P: dict[str, Tensor], config: BackboneConfig
                   ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Batched forward from precomputed ``(B, S, k, C)`` patch inputs."""
    feature, attn = encode(embed_patches(inputs, P), P, config)
    return feature, project(feature, P), attn


def forward(cloud: np.ndarray, params: ModelParams, seed=None, P: dict[str, Tensor] | None = None
            ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Single-cloud forward: ``(feature[D], logits[K], attention[L, H, S+1, S+1])``."""
    inputs, _ = batch_patch_inputs([cloud], params.config, seed)
    P = params.tensors() if P is None else P
    feature, logits, attn = forward_inputs(inputs, P, params.config)
    return feature[0], logits[0], attn[0]
