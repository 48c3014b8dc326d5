"""Point-cloud sampling and cropping kernels.

All kernels work on plain ``(N, 3)`` float arrays and use exhaustive O(N^2)
distance computation. Distances are squared Euclidean, evaluated as
``((p - c) ** 2).sum(-1)`` so that ties resolve identically everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateCropError(ValueError):
    """A crop would contain fewer points than one backbone patch."""


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sq_dists(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    return ((points - center) ** 2).sum(axis=-1)


def fps(points: np.ndarray, m: int, seed=None, start: int | None = None) -> np.ndarray:
    """Farthest-point sampling of ``m`` indices.

    The first index is ``start`` if given, else drawn from ``seed``. Each
    further index maximises the distance to the already selected set; ties go
    to the lower index.
    """
    n = len(points)
    if not 1 <= m <= n:
        raise ValueError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    if start is None:
        start = int(_rng(seed).integers(n))
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    nearest = sq_dists(points, points[start])
    for i in range(1, m):
        nxt = int(np.argmax(nearest))
        selected[i] = nxt
        np.minimum(nearest, sq_dists(points, points[nxt]), out=nearest)
    return selected


def knn(points: np.ndarray, center: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` points nearest ``center``, ties to the lower index."""
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"knn needs 1 <= k <= N, got k={k}, N={n}")
    return np.argsort(sq_dists(points, center), kind="stable")[:k]


def knn_many(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Row ``i`` holds ``knn(points, centers[i], k)``."""
    if not 1 <= k <= len(points):
        raise ValueError(f"knn needs 1 <= k <= N, got k={k}, N={len(points)}")
    d = ((points[None, :, :] - centers[:, None, :]) ** 2).sum(axis=-1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def crop(points: np.ndarray, ratio: float, seed=None, k_patch: int = 1,
         anchor: int | None = None) -> np.ndarray:
    """Contiguous region holding ``round(ratio * N)`` points around a random anchor.

    The region is the anchor's nearest-neighbour ball; points keep their
    original order. ``ratio == 1`` returns the whole cloud.
    """
    n = len(points)
    if not 0 < ratio <= 1:
        raise ValueError(f"crop ratio must lie in (0, 1], got {ratio}")
    size = round_half_up(ratio * n)
    if size < k_patch:
        raise DegenerateCropError(
            f"crop of ratio {ratio:.3f} keeps {size} of {n} points, fewer than k_patch={k_patch}")
    if size == n:
        return points.copy()
    if anchor is None:
        anchor = int(_rng(seed).integers(n))
    idx = np.sort(knn(points, points[anchor], size))
    return points[idx]


def normalize(points: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale the farthest point to unit norm."""
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    return centered / radius if radius > 0 else centered


def resample(points: np.ndarray, size: int, seed=None) -> np.ndarray:
    """Random subset of ``size`` points (with replacement only if too few)."""
    n = len(points)
    if n == size:
        return points
    idx = _rng(seed).choice(n, size=size, replace=n < size)
    return points[np.sort(idx)]


@dataclass
class CropConfig:
    n_global: int = 2
    n_local: int = 8
    n_resolution: int = 2
    global_ratio: tuple[float, float] = (0.7, 1.0)
    local_ratio: tuple[float, float] = (0.2, 0.5)
    k_patch: int = 32
    global_size: int | None = 1024
    local_size: int | None = 256

    def validate(self) -> None:
        (g1, g2), (l1, l2) = self.global_ratio, self.local_ratio
        if not 0 < l1 <= l2 <= g1 <= g2 <= 1:
            raise ValueError(
                f"crop ratios must satisfy 0 < r_l1 <= r_l2 <= r_g1 <= r_g2 <= 1, "
                f"got local={self.local_ratio}, global={self.global_ratio}")
        if self.n_global < 1 or self.n_local < 0 or self.n_resolution < 0:
            raise ValueError("crop counts must be non-negative (at least one global)")


@dataclass
class CropSet:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    n_resolution: int = 0

    @property
    def crops(self) -> list[np.ndarray]:
        """Region crops from the local set, without the resolution additions."""
        return self.locals[:len(self.locals) - self.n_resolution]

    @property
    def resolution(self) -> list[np.ndarray]:
        return self.locals[len(self.locals) - self.n_resolution:]


def make_crop_set(points: np.ndarray, config: CropConfig, seed=None) -> CropSet:
    """Global crops, local crops, and half-resolution FPS copies of one cloud."""
    config.validate()
    rng = _rng(seed)
    n = len(points)
    globals_, locals_ = [], []
    for _ in range(config.n_global):
        c = crop(points, rng.uniform(*config.global_ratio), rng, config.k_patch)
        if config.global_size is not None:
            c = resample(c, config.global_size, rng)
        globals_.append(c)
    for _ in range(config.n_local):
        c = crop(points, rng.uniform(*config.local_ratio), rng, config.k_patch)
        if config.local_size is not None:
            c = resample(c, config.local_size, rng)
        locals_.append(c)
    for _ in range(config.n_resolution):
        if n // 2 < config.k_patch:
            raise DegenerateCropError(f"half resolution ({n // 2} points) is below k_patch")
        locals_.append(points[fps(points, n // 2, rng)])
    return CropSet(globals_, locals_, config.n_resolution)
