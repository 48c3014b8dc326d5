"""Evaluation and diagnostics on frozen teacher features."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import ModelParams, forward_inputs, patch_inputs, patchify
from .train import AdamState, adamw_step


class DegenerateProbeError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    rows: np.ndarray     # (M, D)
    labels: np.ndarray   # (M,)

    def __len__(self) -> int:
        return len(self.rows)


def extract_features(clouds: Sequence[np.ndarray], params: ModelParams, labels=None, seed=0,
                     batch_size: int = 64) -> FeatureMatrix:
    """Class-token feature of the full cloud, one row per cloud.

    Every cloud is patchified with a fresh stream from ``seed``, so a row
    depends only on its cloud, never on its position in the list.
    """
    cfg = params.config
    inputs = [patch_inputs(patchify(np.asarray(c, dtype=np.float64), cfg.k_patch,
                                    np.random.default_rng(seed)), cfg.centroid_channels)
              for c in clouds]
    P = params.tensors()
    rows = np.zeros((len(inputs), cfg.dim))
    by_shape: dict[tuple, list[int]] = {}
    for i, x in enumerate(inputs):
        by_shape.setdefault(x.shape, []).append(i)
    for idx in by_shape.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            feature, _, _ = forward_inputs(np.stack([inputs[i] for i in chunk]), P, cfg)
            rows[chunk] = feature.data
    labels = np.full(len(rows), -1) if labels is None else np.asarray(labels)
    return FeatureMatrix(rows, labels)


# linear probe ----------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    predictions: np.ndarray
    iterations: int


def linear_probe(features: np.ndarray, labels: np.ndarray, train_mask: np.ndarray,
                 reg: float = 1e-3, epochs: int = 2000, lr: float = 0.05, seed=0,
                 tol: float = 1e-6) -> ProbeResult:
    """L2-regularised multinomial logistic regression on standardised features.

    Trained full-batch with AdamW (no decoupled decay; the penalty is in the
    loss) until the gradient norm drops below ``tol`` or ``epochs`` run out.
    Returns accuracy on the rows where ``train_mask`` is false.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    train_mask = np.asarray(train_mask, dtype=bool)
    classes = np.unique(y[train_mask])
    if len(classes) < 2:
        raise DegenerateProbeError("training split holds fewer than two classes")
    mu = X[train_mask].mean(axis=0)
    sd = X[train_mask].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    Xtr, ytr = Z[train_mask], np.searchsorted(classes, y[train_mask])
    n, d = Xtr.shape
    onehot = np.eye(len(classes))[ytr]
    rng = np.random.default_rng(seed)
    params = {"w": rng.normal(0.0, 0.01, size=(d, len(classes))), "b": np.zeros(len(classes))}
    opt = AdamState()
    it = 0
    for it in range(1, epochs + 1):
        logits = Xtr @ params["w"] + params["b"]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        grads = {"w": Xtr.T @ err + 2 * reg * params["w"], "b": err.sum(axis=0)}
        if math.sqrt(sum((g * g).sum() for g in grads.values())) < tol:
            break
        adamw_step(params, grads, opt, lr)

    def predict(rows):
        return classes[np.argmax(rows @ params["w"] + params["b"], axis=1)]

    pred = predict(Z)
    test = ~train_mask
    acc = float((pred[test] == y[test]).mean()) if test.any() else float("nan")
    return ProbeResult(acc, float((pred[train_mask] == y[train_mask]).mean()), pred, it)


# spectrum --------------------------------------------------------------------

def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm falls below ``tol`` (or below
    1e-14 of the matrix norm, whichever is larger). Returns eigenvalues in
    descending order and the matching eigenvectors as columns.
    """
    A = np.array(a, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need a square matrix, got shape {A.shape}")
    A = 0.5 * (A + A.T)
    n = len(A)
    V = np.eye(n)
    stop = max(tol, 1e-14 * np.linalg.norm(A))
    for _ in range(max_sweeps):
        off = math.sqrt(max((A * A).sum() - (np.diag(A) ** 2).sum(), 0.0))
        if off < stop:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-18 * abs(diff):
                    # rotation angle below double precision: t ~ apq / diff
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * ap - s * aq, s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


def covariance(features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    X = X - X.mean(axis=0)
    return X.T @ X / max(len(X) - 1, 1)


@dataclass
class SpectrumReport:
    eigenvalues: list[float]
    normalized: list[float]
    log10_normalized: list[float]
    effective_rank: int
    threshold: float
    collapsed: bool

    def to_dict(self) -> dict:
        return asdict(self)


LOG_FLOOR = 1e-30


def spectrum(features: np.ndarray, threshold: float = 1e-3) -> SpectrumReport:
    """Covariance eigenvalues, max-normalised and on a log10 scale.

    ``log10_normalized`` is floored at ``log10(1e-30)`` so exact zeros stay finite.
    """
    vals, _ = jacobi_eigh(covariance(features))
    vals = np.maximum(vals, 0.0)
    top = vals[0] if len(vals) else 0.0
    norm = vals / top if top > 0 else np.zeros_like(vals)
    return SpectrumReport(
        eigenvalues=vals.tolist(), normalized=norm.tolist(),
        log10_normalized=np.log10(np.maximum(norm, LOG_FLOOR)).tolist(),
        effective_rank=int((norm > threshold).sum()), threshold=threshold, collapsed=bool(top == 0))


def pca_project(features: np.ndarray, dims: int = 2) -> np.ndarray:
    """Coordinates on the top ``dims`` covariance eigenvectors (sign fixed by largest entry)."""
    X = np.asarray(features, dtype=np.float64)
    _, vecs = jacobi_eigh(covariance(X))
    vecs = vecs[:, :dims]
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    return (X - X.mean(axis=0)) @ (vecs * np.where(signs == 0, 1.0, signs))


# file exports ----------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v))
                              for v in r) + "\n")


def write_ply(path, points: np.ndarray, colors: np.ndarray, comments: Sequence[str] = ()) -> None:
    """ASCII PLY with per-vertex x, y, z, red, green, blue."""
    colors = np.clip(np.asarray(colors), 0, 255).astype(np.uint8)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        for c in comments:
            fh.write(f"comment {c}\n")
        fh.write(f"element vertex {len(points)}\n")
        for axis in "xyz":
            fh.write(f"property float {axis}\n")
        for ch in ("red", "green", "blue"):
            fh.write(f"property uchar {ch}\n")
        fh.write("end_header\n")
        for p, c in zip(points, colors):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


def heat_colors(values: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp for values in [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[:, None]
    rgb = np.clip(3.0 * v - np.array([0.0, 1.0, 2.0]), 0.0, 1.0)
    return np.round(255 * rgb).astype(np.uint8)


@dataclass
class AttentionExport:
    paths: list[Path]
    patch_weights: np.ndarray   # (heads, S), each row sums to 1
    point_weights: np.ndarray   # (heads, N)
    layer: int


def class_attention(cloud: np.ndarray, params: ModelParams, layer: int = -1, seed=0):
    """Class-token attention over patches for every head, class-to-class mass removed."""
    cfg = params.config
    patches = patchify(np.asarray(cloud, dtype=np.float64), cfg.k_patch, np.random.default_rng(seed))
    _, _, attn = forward_inputs(patch_inputs(patches, cfg.centroid_channels)[None], params.tensors(), cfg)
    layer = layer % cfg.depth
    row = attn[0, layer, :, 0, 1:]
    return row / row.sum(axis=1, keepdims=True), patches, layer


def export_attention(cloud: np.ndarray, params: ModelParams, out_dir, layer: int = -1, seed=0,
                     stem: str = "attention", meta: dict | None = None) -> AttentionExport:
    """Paint each head's class-token attention onto the cloud, one PLY per head.

    A point in several patches takes the largest of their weights; points in
    no patch get 0. Colours are scaled by the head's maximum for contrast.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    weights, patches, layer = class_attention(cloud, params, layer, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    point_w = np.zeros((len(weights), len(cloud)))
    for h, w in enumerate(weights):
        for i, members in enumerate(patches.index):
            np.maximum.at(point_w[h], members, w[i])
    paths = []
    extra = [f"{k} {json.dumps(v)}" for k, v in (meta or {}).items()]
    for h in range(len(weights)):
        path = out / f"{stem}_head{h}.ply"
        peak = point_w[h].max()
        write_ply(path, cloud, heat_colors(point_w[h] / peak if peak > 0 else point_w[h]),
                  [f"head {h}", f"layer {layer}", f"seed {seed}", *extra])
        paths.append(path)
    sidecar = {"layer": layer, "seed": seed, "heads": len(weights),
               "patch_weights": weights.tolist(), **(meta or {})}
    (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return AttentionExport(paths, weights, point_w, layer)
