"""Desk-scale data: procedural shapes, OFF meshes, and the PCB1 container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import _rng, normalize

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "plane")
PCB_MAGIC = b"PCB1"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    clouds: list[np.ndarray]
    labels: np.ndarray
    class_names: list[str]
    split: np.ndarray = field(default=None)  # 1 = train, 0 = test

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.split is None:
            self.split = np.ones(len(self.clouds), dtype=bool)
        self.split = np.asarray(self.split, dtype=bool)
        if not len(self.clouds) == len(self.labels) == len(self.split):
            raise DataError("clouds, labels and split must have equal length")
        if len(self.labels) and not (0 <= self.labels.min() and self.labels.max() < len(self.class_names)):
            raise DataError("label outside [0, number of classes)")

    def __len__(self) -> int:
        return len(self.clouds)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset([self.clouds[i] for i in idx], self.labels[idx], self.class_names,
                       self.split[idx])

    @property
    def train(self) -> "Dataset":
        return self.subset(self.split)

    @property
    def test(self) -> "Dataset":
        return self.subset(~self.split)


# procedural surfaces -------------------------------------------------------

def _sphere(n, rng):
    half = rng.normal(size=((n + 1) // 2, 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    # antipodal pairs put the centroid exactly at the centre
    return np.concatenate([half, -half])[:n]


def _cube(n, rng):
    face = rng.integers(6, size=n)
    p = rng.uniform(-1, 1, size=(n, 3))
    axis = face % 3
    p[np.arange(n), axis] = np.where(face < 3, -1.0, 1.0)
    return p


def _cylinder(n, rng, r=1.0, h=2.0):
    areas = np.array([2 * math.pi * r * h, math.pi * r * r, math.pi * r * r])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.select([part == 0, part == 1], [rng.uniform(-h / 2, h / 2, size=n), -h / 2], h / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(n, rng, r=1.0, h=2.0):
    slant = math.hypot(r, h)
    areas = np.array([math.pi * r * slant, math.pi * r * r])
    lateral = rng.uniform(size=n) < areas[0] / areas.sum()
    theta = rng.uniform(0, 2 * math.pi, size=n)
    # lateral area density grows linearly with distance from the apex
    t = np.sqrt(rng.uniform(size=n))
    rad = np.where(lateral, r * t, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(lateral, h / 2 - h * t, -h / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(n, rng, big=1.0, small=0.35):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * math.pi, size=m)
        v = rng.uniform(0, 2 * math.pi, size=m)
        keep = rng.uniform(size=m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
    return out[:n]


def _plane(n, rng):
    return np.column_stack([rng.uniform(-1, 1, size=(n, 2)), np.zeros(n)])


_GENERATORS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder,
               "cone": _cone, "torus": _torus, "plane": _plane}


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def synth_cloud(shape: str, n_points: int, noise_sigma: float = 0.0, seed=None) -> np.ndarray:
    """One normalised cloud sampled from the surface of a random primitive instance.

    Non-spheres get an anisotropic scale in [0.5, 1.5] per axis; spheres are
    scaled isotropically so the class stays a sphere.
    """
    if shape not in _GENERATORS:
        raise DataError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")
    rng = _rng(seed)
    pts = _GENERATORS[shape](n_points, rng)
    scale = rng.uniform(0.5, 1.5, size=1 if shape == "sphere" else 3)
    pts = (pts * scale) @ random_rotation(rng).T
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return normalize(pts)


def synth_dataset(classes=SHAPES, per_class: int = 50, n_points: int = 1024,
                  noise_sigma: float = 0.01, seed=0, test_fraction: float = 0.2) -> Dataset:
    """Balanced procedural dataset with a stratified train/test split."""
    classes = list(classes)
    for c in classes:
        if c not in _GENERATORS:
            raise DataError(f"unknown class {c!r}; choose from {', '.join(SHAPES)}")
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(classes) * per_class + 1)
    clouds, labels = [], []
    for ci, name in enumerate(classes):
        for j in range(per_class):
            rng = np.random.default_rng(streams[ci * per_class + j])
            clouds.append(synth_cloud(name, n_points, noise_sigma, rng))
            labels.append(ci)
    labels = np.array(labels)
    split_rng = np.random.default_rng(streams[-1])
    split = np.ones(len(labels), dtype=bool)
    n_test = int(round(test_fraction * per_class))
    for ci in range(len(classes)):
        members = np.flatnonzero(labels == ci)
        split[split_rng.choice(members, size=n_test, replace=False)] = False
    return Dataset(clouds, labels, classes, split)


# OFF meshes ----------------------------------------------------------------

class OffParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class OffMesh:
    vertices: np.ndarray   # (V, 3)
    faces: np.ndarray      # (F, 3) int


def parse_off(text: str) -> OffMesh:
    """Parse OFF text, fanning polygons into triangles.

    Accepts the header fused with the counts (``OFF490 700 0``), comments
    starting with ``#`` and trailing per-face colour values.
    """
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines:
        raise OffParseError("empty input", 1)
    it = iter(lines)
    lineno, first = next(it)
    if not first.startswith("OFF"):
        raise OffParseError(f"expected 'OFF' header, got {first[:20]!r}", lineno)
    rest = first[3:].strip()
    if not rest:
        try:
            lineno, rest = next(it)
        except StopIteration:
            raise OffParseError("missing counts line", lineno) from None
    counts = rest.split()
    if len(counts) < 2:
        raise OffParseError(f"malformed counts line {rest!r}", lineno)
    try:
        n_vert, n_face = int(counts[0]), int(counts[1])
    except ValueError:
        raise OffParseError(f"malformed counts line {rest!r}", lineno) from None
    if n_vert < 0 or n_face < 0:
        raise OffParseError("negative element count", lineno)
    consumed = 1 if first[3:].strip() else 2
    if n_vert + n_face > len(lines) - consumed:
        raise OffParseError(f"truncated: header promises {n_vert} vertices and {n_face} faces "
                            f"but only {len(lines) - consumed} data lines follow", lineno)

    vertices = np.empty((n_vert, 3))
    for v in range(n_vert):
        try:
            lineno, ln = next(it)
        except StopIteration:
            raise OffParseError(f"truncated: expected {n_vert} vertices, got {v}", lineno) from None
        parts = ln.split()
        if len(parts) < 3:
            raise OffParseError(f"vertex needs 3 coordinates, got {len(parts)}", lineno)
        try:
            vertices[v] = [float(x) for x in parts[:3]]
        except ValueError:
            raise OffParseError(f"non-numeric vertex {ln!r}", lineno) from None
        if not np.all(np.isfinite(vertices[v])):
            raise OffParseError("non-finite vertex coordinate", lineno)

    tris = []
    for f in range(n_face):
        try:
            lineno, ln = next(it)
        except StopIteration:
            raise OffParseError(f"truncated: expected {n_face} faces, got {f}", lineno) from None
        parts = ln.split()
        try:
            k = int(parts[0])
            idx = [int(x) for x in parts[1:1 + k]]
        except ValueError:
            raise OffParseError(f"non-integer face {ln!r}", lineno) from None
        if k < 3 or len(idx) < k:
            raise OffParseError(f"face needs at least 3 indices, got {ln!r}", lineno)
        if any(i < 0 or i >= n_vert for i in idx):
            raise OffParseError(f"face index out of range [0, {n_vert})", lineno)
        tris.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1))
    return OffMesh(vertices, np.array(tris, dtype=np.int64).reshape(-1, 3))


def format_off(mesh: OffMesh) -> str:
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    out += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    return "\n".join(out) + "\n"


def load_off(path) -> OffMesh:
    return parse_off(Path(path).read_text())


def triangle_areas(mesh: OffMesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh(mesh: OffMesh, n_points: int, seed=None) -> np.ndarray:
    """Uniform surface samples: area-weighted triangle choice, uniform barycentrics."""
    areas = triangle_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise DataError("mesh has zero surface area")
    rng = _rng(seed)
    tri = rng.choice(len(areas), size=n_points, p=areas / total)
    r1, r2 = rng.uniform(size=(2, n_points))
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    corners = mesh.vertices[mesh.faces[tri]]          # (n, 3, 3)
    return np.einsum("nk,nkd->nd", w, corners)


# PCB1 container ------------------------------------------------------------

def write_pcb(path, dataset: Dataset) -> None:
    """``PCB1``, u32 count, then per cloud i32 label, u32 N, N*3 f64 (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(PCB_MAGIC)
        fh.write(struct.pack("<I", len(dataset)))
        for cloud, label in zip(dataset.clouds, dataset.labels):
            cloud = np.asarray(cloud, dtype="<f8")
            fh.write(struct.pack("<iI", int(label), len(cloud)))
            fh.write(np.ascontiguousarray(cloud).tobytes())


def read_pcb(path) -> tuple[list[np.ndarray], np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != PCB_MAGIC:
        raise DataError(f"{path}: not a PCB1 container")
    pos = 8
    if len(data) < pos:
        raise DataError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", data, 4)
    clouds, labels = [], []
    for i in range(count):
        if pos + 8 > len(data):
            raise DataError(f"{path}: truncated at cloud {i}")
        label, n = struct.unpack_from("<iI", data, pos)
        pos += 8
        end = pos + 24 * n
        if end > len(data):
            raise DataError(f"{path}: truncated points in cloud {i}")
        clouds.append(np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(n, 3))
        labels.append(label)
        pos = end
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes")
    return clouds, np.array(labels, dtype=np.int64)


def save_dataset(directory, dataset: Dataset, meta: dict | None = None,
                 name: str = "dataset") -> Path:
    """Write ``<name>.pcb`` plus a ``<name>.json`` manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pcb(directory / f"{name}.pcb", dataset)
    manifest = {
        "files": [f"{name}.pcb"],
        "class_names": list(dataset.class_names),
        "labels": dataset.labels.tolist(),
        "split": ["train" if s else "test" for s in dataset.split],
        **(meta or {}),
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    missing = {"files", "class_names"} - set(manifest) if isinstance(manifest, dict) else {"files"}
    if missing:
        raise DataError(f"{manifest_path}: manifest lacks {', '.join(sorted(missing))}")
    clouds, labels = [], []
    for f in manifest["files"]:
        c, l = read_pcb(manifest_path.parent / f)
        clouds += c
        labels.append(l)
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    if "labels" in manifest and list(labels) != list(manifest["labels"]):
        raise DataError(f"{manifest_path}: labels disagree with container contents")
    split = np.array([s == "train" for s in manifest.get("split", ["train"] * len(labels))])
    return Dataset(clouds, labels, manifest["class_names"], split)
