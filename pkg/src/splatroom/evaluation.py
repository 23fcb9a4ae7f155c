"""Geometric evaluation: Accuracy, Completion, Precision, Recall, F-score
between predicted and ground-truth geometry.

Both sides are point clouds; meshes are converted by area-weighted uniform
surface sampling.  Nearest neighbors come from an exact KD-tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import formats

__all__ = ["EvalConfig", "sample_mesh", "compute_metrics", "fscore",
           "load_geometry_points"]


@dataclass
class EvalConfig:
    threshold: float = 0.05   # meters
    n_samples: int = 100000
    seed: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def fscore(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both vanish."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def sample_mesh(vertices: np.ndarray, triangles: np.ndarray, n: int,
                seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface sampling, deterministic given the seed."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    if triangles.shape[0] == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri_idx = rng.choice(len(areas), size=n, p=areas / total)
    # uniform barycentric via the square-root trick
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return (w0[:, None] * a[tri_idx] + w1[:, None] * b[tri_idx]
            + w2[:, None] * c[tri_idx])


def compute_metrics(pred: np.ndarray, gt: np.ndarray,
                    config: EvalConfig | None = None) -> dict[str, float]:
    """Point-cloud metrics at the configured distance threshold."""
    if config is None:
        config = EvalConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("both clouds must be non-empty")
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    prec = float(np.mean(d_pred < config.threshold))
    rec = float(np.mean(d_gt < config.threshold))
    return {
        "accuracy": float(np.mean(d_pred)),
        "completion": float(np.mean(d_gt)),
        "precision": prec,
        "recall": rec,
        "fscore": fscore(prec, rec),
    }


def load_geometry_points(path, n_samples: int, seed: int = 0) -> np.ndarray:
    """PLY to evaluation points: meshes are surface-sampled, clouds used as-is."""
    ply = formats.read_ply(path)
    v = ply["vertex"]
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if ply["face"] is not None and len(ply["face"]) > 0:
        return sample_mesh(pts, ply["face"], n_samples, seed)
    return pts


def metrics_report(metrics: dict[str, float]) -> str:
    return json.dumps(metrics, indent=1, sort_keys=True)
