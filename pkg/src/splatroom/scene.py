"""Persistent reconstruction state: point cloud, seed points, surfels, cameras.

The scene is stored structure-of-arrays for vectorized rendering; the
dataclasses below (:class:`SfmPoint`, :class:`SeedPoint`, :class:`Surfel`)
are the record views handed out by accessors.  Seeds and surfels carry
stable integer handles (uids) that survive growth and pruning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SfmPoint",
    "SeedConfig",
    "SeedPoint",
    "Surfel",
    "Camera",
    "GaussianScene",
    "SceneSnapshot",
    "filter_points",
    "voxelize_seeds",
    "surfel_world_center",
    "sigmoid",
    "inverse_sigmoid",
    "scale_activation",
    "inverse_scale_activation",
]


def sigmoid(x):
    """Numerically stable logistic function, maps R -> (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def inverse_sigmoid(y):
    """Logit, inverse of :func:`sigmoid` on (0, 1)."""
    y = np.asarray(y, dtype=np.float64)
    res = np.log(y) - np.log1p(-y)
    if res.ndim == 0:
        return float(res)
    return res


def scale_activation(raw):
    """Raw scale parameter to positive scale (exp)."""
    return np.exp(raw)


def inverse_scale_activation(s):
    """Positive scale to raw parameter (log)."""
    return np.log(s)


@dataclass
class SfmPoint:
    """One point of the structure-from-motion input cloud."""

    position: np.ndarray
    match_count: int = 0
    color: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.position.shape != (3,) or not np.all(np.isfinite(self.position)):
            raise ValueError("SfmPoint position must be a finite 3-vector")
        if self.match_count < 0:
            raise ValueError("match_count must be non-negative")
        if self.color is not None:
            self.color = np.asarray(self.color, dtype=np.float64)


@dataclass
class SeedConfig:
    """Seed initialization parameters.

    min_matches is the feature-match confidence threshold, voxel_size the
    base voxel edge length in meters, surfels_per_seed the number of
    Gaussians anchored to every seed.
    """

    min_matches: int = 3
    voxel_size: float = 0.05
    surfels_per_seed: int = 10

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.surfels_per_seed < 1:
            raise ValueError("surfels_per_seed must be >= 1")
        if self.min_matches < 0:
            raise ValueError("min_matches must be >= 0")


@dataclass
class SeedPoint:
    """Record view of one seed: a voxel-derived anchor owning k surfels."""

    uid: int
    anchor: np.ndarray
    level: int
    grad_accum: float
    grad_count: int
    opacity_accum: float
    surfel_ids: list[int]
    active: bool
    created_iter: int = 0


@dataclass
class Surfel:
    """Record view of one 2D Gaussian disk (raw, pre-activation parameters)."""

    uid: int
    offset: np.ndarray
    rotation: np.ndarray           # unit quaternion (w, x, y, z)
    log_scale: np.ndarray          # (2,), s = exp(raw)
    raw_opacity: float             # alpha = sigmoid(raw)
    raw_color: np.ndarray          # (3,), c = sigmoid(raw) per channel
    seed_id: int


@dataclass
class Camera:
    """Pinhole camera: intrinsics plus world-to-camera pose.

    Convention: right-handed, +z into the screen, pixel (0, 0) top-left,
    pixel centers at half-integer coordinates.
    """

    K: np.ndarray
    R_wc: np.ndarray
    t_wc: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R_wc = np.asarray(self.R_wc, dtype=np.float64)
        self.t_wc = np.asarray(self.t_wc, dtype=np.float64).reshape(3)
        if self.K.shape != (3, 3):
            raise ValueError("K must be 3x3")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R_wc @ self.R_wc.T, np.eye(3), atol=1e-6):
            raise ValueError("R_wc must be orthonormal (R R^T = I within 1e-6)")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R_wc.T @ self.t_wc

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R_wc.T + self.t_wc

    def world_to_screen(self) -> np.ndarray:
        """4x4 matrix mapping world homogeneous points to (x*z, y*z, z, z).

        x, y are pixel coordinates of the projection and z the camera depth.
        """
        W = np.empty((4, 4), dtype=np.float64)
        W[0, :3] = self.fx * self.R_wc[0] + self.cx * self.R_wc[2]
        W[0, 3] = self.fx * self.t_wc[0] + self.cx * self.t_wc[2]
        W[1, :3] = self.fy * self.R_wc[1] + self.cy * self.R_wc[2]
        W[1, 3] = self.fy * self.t_wc[1] + self.cy * self.t_wc[2]
        W[2, :3] = self.R_wc[2]
        W[2, 3] = self.t_wc[2]
        W[3] = W[2]
        return W

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns (pixel_xy, camera_depth)."""
        cam = self.world_to_camera(np.atleast_2d(points))
        z = cam[:, 2]
        x = self.fx * cam[:, 0] / z + self.cx
        y = self.fy * cam[:, 1] / z + self.cy
        return np.stack([x, y], axis=-1), z


def filter_points(points: list[SfmPoint], min_matches: int) -> list[SfmPoint]:
    """Keep points whose feature-match count reaches the threshold.

    Order is preserved; an empty result is returned (not raised) when every
    point is filtered out.
    """
    return [p for p in points if p.match_count >= min_matches]


def _voxel_key(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel index per point, floor(p / voxel_size)."""
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel_size).astype(np.int64)


@dataclass
class SceneSnapshot:
    """Read-only view of the live surfel parameters for a render pass."""

    anchors: np.ndarray        # (S, 3) seed anchors
    seed_of_surfel: np.ndarray  # (N,) row index into anchors
    surfel_uid: np.ndarray     # (N,)
    offset: np.ndarray         # (N, 3)
    quat: np.ndarray           # (N, 4) (w, x, y, z)
    log_scale: np.ndarray      # (N, 2)
    raw_opacity: np.ndarray    # (N,)
    raw_color: np.ndarray      # (N, 3)

    @property
    def n_surfels(self) -> int:
        return self.offset.shape[0]

    def world_centers(self) -> np.ndarray:
        return self.anchors[self.seed_of_surfel] + self.offset


class GaussianScene:
    """Owner of all seeds and surfels, mutated only between render passes."""

    def __init__(self, seed_config: SeedConfig):
        self.config = seed_config
        k = seed_config.surfels_per_seed
        self.k = k
        # seed arrays
        self.seed_uid = np.empty(0, dtype=np.int64)
        self.anchor = np.empty((0, 3), dtype=np.float64)
        self.level = np.empty(0, dtype=np.int64)
        self.created_iter = np.empty(0, dtype=np.int64)
        self.grad_accum = np.empty(0, dtype=np.float64)
        self.grad_count = np.empty(0, dtype=np.int64)
        self.opacity_accum = np.empty(0, dtype=np.float64)
        # surfel arrays, grouped by seed: surfels of seed row s live at rows [s*k, (s+1)*k)
        self.surfel_uid = np.empty(0, dtype=np.int64)
        self.offset = np.empty((0, 3), dtype=np.float64)
        self.quat = np.empty((0, 4), dtype=np.float64)
        self.log_scale = np.empty((0, 2), dtype=np.float64)
        self.raw_opacity = np.empty(0, dtype=np.float64)
        self.raw_color = np.empty((0, 3), dtype=np.float64)
        self._next_seed_uid = 0
        self._next_surfel_uid = 0
        self._seed_row: dict[int, int] = {}
        self._surfel_row: dict[int, int] = {}

    # -- structure ---------------------------------------------------------

    @property
    def n_seeds(self) -> int:
        return self.anchor.shape[0]

    @property
    def n_surfels(self) -> int:
        return self.offset.shape[0]

    def seed_of_surfel_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_seeds, dtype=np.int64), self.k)

    def _rebuild_maps(self) -> None:
        self._seed_row = {int(u): i for i, u in enumerate(self.seed_uid)}
        self._surfel_row = {int(u): i for i, u in enumerate(self.surfel_uid)}

    def add_seeds(
        self,
        anchors: np.ndarray,
        level: int,
        voxel_size: float,
        rng: np.random.Generator,
        colors: np.ndarray | None = None,
        iteration: int = 0,
    ) -> int:
        """Append seeds at the given anchors, each with k fresh surfels.

        Surfel init: zero offset plus uniform jitter in [-voxel/4, voxel/4]^3,
        identity rotation, isotropic scale voxel/4, opacity 0.1 and the seed's
        color (0.5 gray when unknown), all stored pre-activation.
        """
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
        n = anchors.shape[0]
        if n == 0:
            return 0
        k = self.k
        uids = np.arange(self._next_seed_uid, self._next_seed_uid + n, dtype=np.int64)
        self._next_seed_uid += n
        self.seed_uid = np.concatenate([self.seed_uid, uids])
        self.anchor = np.concatenate([self.anchor, anchors])
        self.level = np.concatenate([self.level, np.full(n, level, dtype=np.int64)])
        self.created_iter = np.concatenate(
            [self.created_iter, np.full(n, iteration, dtype=np.int64)]
        )
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(n, dtype=np.int64)])
        self.opacity_accum = np.concatenate([self.opacity_accum, np.zeros(n)])

        m = n * k
        suids = np.arange(self._next_surfel_uid, self._next_surfel_uid + m, dtype=np.int64)
        self._next_surfel_uid += m
        jitter = rng.uniform(-voxel_size / 4.0, voxel_size / 4.0, size=(m, 3))
        quat = np.zeros((m, 4))
        quat[:, 0] = 1.0
        if colors is None:
            col = np.full((n, 3), 0.5)
        else:
            col = np.clip(np.atleast_2d(np.asarray(colors, dtype=np.float64)), 1e-3, 1 - 1e-3)
        raw_col = inverse_sigmoid(np.repeat(col, k, axis=0))

        self.surfel_uid = np.concatenate([self.surfel_uid, suids])
        self.offset = np.concatenate([self.offset, jitter])
        self.quat = np.concatenate([self.quat, quat])
        self.log_scale = np.concatenate(
            [self.log_scale, np.full((m, 2), np.log(voxel_size / 4.0))]
        )
        self.raw_opacity = np.concatenate(
            [self.raw_opacity, np.full(m, inverse_sigmoid(0.1))]
        )
        self.raw_color = np.concatenate([self.raw_color, raw_col])
        self._rebuild_maps()
        return n

    def remove_seeds(self, seed_rows: np.ndarray) -> np.ndarray:
        """Drop the given seed rows and their surfels.

        Returns the boolean keep-mask over the previous surfel rows so the
        optimizer can compact its moment buffers identically.
        """
        seed_keep = np.ones(self.n_seeds, dtype=bool)
        seed_keep[np.asarray(seed_rows, dtype=np.int64)] = False
        surf_keep = np.repeat(seed_keep, self.k)
        self.seed_uid = self.seed_uid[seed_keep]
        self.anchor = self.anchor[seed_keep]
        self.level = self.level[seed_keep]
        self.created_iter = self.created_iter[seed_keep]
        self.grad_accum = self.grad_accum[seed_keep]
        self.grad_count = self.grad_count[seed_keep]
        self.opacity_accum = self.opacity_accum[seed_keep]
        self.surfel_uid = self.surfel_uid[surf_keep]
        self.offset = self.offset[surf_keep]
        self.quat = self.quat[surf_keep]
        self.log_scale = self.log_scale[surf_keep]
        self.raw_opacity = self.raw_opacity[surf_keep]
        self.raw_color = self.raw_color[surf_keep]
        self._rebuild_maps()
        return surf_keep

    # -- record views ------------------------------------------------------

    def get_seed(self, uid: int) -> SeedPoint:
        if uid not in self._seed_row:
            raise KeyError(f"seed handle {uid} is dangling")
        row = self._seed_row[uid]
        k = self.k
        return SeedPoint(
            uid=uid,
            anchor=self.anchor[row].copy(),
            level=int(self.level[row]),
            grad_accum=float(self.grad_accum[row]),
            grad_count=int(self.grad_count[row]),
            opacity_accum=float(self.opacity_accum[row]),
            surfel_ids=[int(u) for u in self.surfel_uid[row * k : (row + 1) * k]],
            active=True,
            created_iter=int(self.created_iter[row]),
        )

    def get_surfel(self, uid: int) -> Surfel:
        if uid not in self._surfel_row:
            raise KeyError(f"surfel handle {uid} is dangling")
        row = self._surfel_row[uid]
        return Surfel(
            uid=uid,
            offset=self.offset[row].copy(),
            rotation=self.quat[row].copy(),
            log_scale=self.log_scale[row].copy(),
            raw_opacity=float(self.raw_opacity[row]),
            raw_color=self.raw_color[row].copy(),
            seed_id=int(self.seed_uid[row // self.k]),
        )

    def seeds(self) -> list[SeedPoint]:
        return [self.get_seed(int(u)) for u in self.seed_uid]

    def snapshot(self) -> SceneSnapshot:
        """Immutable parameter copy, safe to share across render workers."""
        snap = SceneSnapshot(
            anchors=self.anchor.copy(),
            seed_of_surfel=self.seed_of_surfel_rows(),
            surfel_uid=self.surfel_uid.copy(),
            offset=self.offset.copy(),
            quat=self.quat.copy(),
            log_scale=self.log_scale.copy(),
            raw_opacity=self.raw_opacity.copy(),
            raw_color=self.raw_color.copy(),
        )
        for arr in (snap.anchors, snap.offset, snap.quat, snap.log_scale,
                    snap.raw_opacity, snap.raw_color):
            arr.flags.writeable = False
        return snap

    def check_integrity(self) -> None:
        """Raise if seed/surfel referential integrity is broken."""
        if self.n_surfels != self.n_seeds * self.k:
            raise AssertionError("surfel count is not seeds * k")
        if len(self._seed_row) != self.n_seeds or len(self._surfel_row) != self.n_surfels:
            raise AssertionError("uid maps out of sync")
        if self.n_seeds and len(np.unique(self.seed_uid)) != self.n_seeds:
            raise AssertionError("duplicate seed uids")

    def normalize_rotations(self) -> None:
        """Renormalize quaternions that drifted off the unit sphere.

        Rows already unit within 1e-12 are left untouched so a zero-gradient
        optimizer step leaves the parameters bit-identical.
        """
        sq = np.sum(self.quat * self.quat, axis=1, keepdims=True)
        drifted = np.abs(sq - 1.0) > 2e-12
        if drifted.any():
            norms = np.where(drifted, np.sqrt(sq), 1.0)
            np.divide(self.quat, norms, out=self.quat, where=norms > 0)


def voxelize_seeds(
    points: list[SfmPoint],
    config: SeedConfig,
    rng: np.random.Generator | None = None,
) -> GaussianScene:
    """Build the seed scene: one seed per occupied voxel, at the voxel center.

    Anchor = floor(p / voxel) * voxel + voxel/2.  Each seed receives k
    surfels initialized around it; the surfel color starts from the mean
    color of the voxel's points (0.5 gray when colors are absent).
    """
    if not points:
        raise ValueError("no points after filtering")
    if rng is None:
        rng = np.random.default_rng(0)
    delta = config.voxel_size
    pos = np.stack([p.position for p in points])
    keys = _voxel_key(pos, delta)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    anchors = uniq.astype(np.float64) * delta + delta / 2.0

    have_color = all(p.color is not None for p in points)
    colors = None
    if have_color:
        cols = np.stack([p.color for p in points])
        sums = np.zeros((uniq.shape[0], 3))
        counts = np.zeros(uniq.shape[0])
        for c in range(3):
            sums[:, c] = np.bincount(inverse, weights=cols[:, c], minlength=uniq.shape[0])
        counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
        colors = sums / counts[:, None]

    scene = GaussianScene(config)
    scene.add_seeds(anchors, level=0, voxel_size=delta, rng=rng, colors=colors)
    return scene


def surfel_world_center(scene: GaussianScene, surfel_uid: int) -> np.ndarray:
    """World position of a surfel: its seed anchor plus the learnable offset."""
    if surfel_uid not in scene._surfel_row:
        raise KeyError(f"surfel handle {surfel_uid} is dangling")
    row = scene._surfel_row[surfel_uid]
    seed_row = row // scene.k
    return scene.anchor[seed_row] + scene.offset[row]
