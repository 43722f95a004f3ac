"""Procedural point clouds sampled on simple closed surfaces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("sphere", "cube", "torus", "cylinder")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SynthDataset:
    classes: tuple[str, ...] = SHAPES
    n_points: int = 512
    noise_sigma: float = 0.02
    seed: int = 0
    train_per_class: int = 200
    test_per_class: int = 100
    rotate: bool = True

    def __post_init__(self):
        if self.n_points < 16:
            raise DatasetError(f"n_points must be >= 16, got {self.n_points}")
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            raise DatasetError(f"unknown shape classes {unknown}; choose from {SHAPES}")
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("duplicate class names")


@dataclass
class Split:
    clouds: np.ndarray  # [M, N, 3]
    labels: np.ndarray  # [M]

    def __len__(self) -> int:
        return len(self.labels)


def _sphere(rng, n):
    # antipodal pairs keep the centroid at the origin, so normalisation leaves radii at 1
    v = rng.normal(size=((n + 1) // 2, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.concatenate([v, -v])[:n]


def _cube(rng, n):
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1, 1, size=(n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2, 1.0, -1.0)
    return pts


def _torus(rng, n, major=1.0, minor=0.4):
    # area element is proportional to (major + minor * cos(v)); rejection-sample v
    out = np.empty(0)
    while out.size < n:
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, major + minor, size=2 * n) < major + minor * np.cos(v)
        out = np.concatenate([out, v[keep]])
    v = out[:n]
    u = rng.uniform(0, 2 * np.pi, size=n)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _cylinder(rng, n, radius=1.0, half_height=1.0):
    side = 2 * np.pi * radius * 2 * half_height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.select([part == 0, part == 1], [rng.uniform(-half_height, half_height, size=n), half_height], -half_height)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder}


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def normalize(points: np.ndarray) -> np.ndarray:
    """Zero centroid, unit max radius."""
    pts = points - points.mean(axis=0)
    scale = np.max(np.linalg.norm(pts, axis=1))
    return pts / scale if scale > 0 else pts


def sample_cloud(shape: str, n_points: int, noise_sigma: float, seed: int, index: int,
                 rotate: bool = True, class_id: int = 0) -> np.ndarray:
    """One cloud; a pure function of (seed, class_id, index)."""
    if shape not in _SAMPLERS:
        raise DatasetError(f"unknown shape {shape!r}")
    rng = np.random.default_rng([seed, class_id, index])
    pts = _SAMPLERS[shape](rng, n_points)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    if rotate:
        pts = pts @ _rotation(rng).T
    return normalize(pts)


def generate_dataset(spec: SynthDataset) -> tuple[Split, Split]:
    """Stratified train/test splits; test clouds use indices after the train ones."""
    splits = []
    for offset, per_class in ((0, spec.train_per_class), (spec.train_per_class, spec.test_per_class)):
        clouds, labels = [], []
        for cid, shape in enumerate(spec.classes):
            for i in range(per_class):
                clouds.append(sample_cloud(shape, spec.n_points, spec.noise_sigma, spec.seed,
                                           offset + i, spec.rotate, cid))
                labels.append(cid)
        arr = np.stack(clouds) if clouds else np.zeros((0, spec.n_points, 3))
        splits.append(Split(arr, np.array(labels, dtype=np.int64)))
    return splits[0], splits[1]
