"""Adaptive seed-point growth and contribution-based pruning.

Growth quantizes the surfel positions of high-gradient seeds into the next
finer voxel level (half the edge length, double the gradient threshold) and
plants fresh seeds in unoccupied voxels.  Pruning removes seeds whose mean
per-surfel opacity over the accumulation window stays below the threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .scene import GaussianScene, sigmoid

logger = logging.getLogger(__name__)

__all__ = ["DensifyConfig", "grow_seeds", "prune_seeds"]


@dataclass
class DensifyConfig:
    """Growth/pruning schedule and thresholds."""

    grow_interval: int = 100       # iterations accumulated per growth decision
    prune_interval: int = 100      # iterations accumulated per prune decision
    grow_threshold: float = 0.0002  # base mean screen-gradient threshold
    prune_opacity: float = 0.5     # mean per-surfel opacity below this is pruned
    max_level: int = 2
    start_iter: int = 1500
    end_iter: int = 15000

    def __post_init__(self):
        if self.start_iter >= self.end_iter:
            raise ValueError("start_iter must be below end_iter")
        if self.grow_threshold <= 0 or self.prune_opacity <= 0:
            raise ValueError("thresholds must be positive")

    def in_window(self, iteration: int) -> bool:
        return self.start_iter <= iteration <= self.end_iter


def _level_keys(positions: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel).astype(np.int64)


def grow_seeds(
    scene: GaussianScene,
    config: DensifyConfig,
    iteration: int,
    rng: np.random.Generator,
    optimizer=None,
) -> int:
    """Create finer-level seeds where the accumulated gradient demands detail.

    Candidate positions are the surfel world centers of every seed whose
    windowed mean gradient exceeds ``grow_threshold * 2**level``; each
    candidate claims the level-(l+1) voxel it falls into unless a seed of
    that level already occupies it.  Accumulators of processed seeds reset.
    Returns the number of seeds created.
    """
    if not config.in_window(iteration):
        return 0
    base_voxel = scene.config.voxel_size
    n_before = scene.n_seeds
    processed = scene.grad_count >= config.grow_interval
    if not processed.any():
        return 0
    mean_grad = np.zeros(scene.n_seeds)
    mean_grad[processed] = scene.grad_accum[processed] / scene.grad_count[processed]
    thresh = config.grow_threshold * (2.0 ** scene.level)
    growers = processed & (mean_grad > thresh) & (scene.level < config.max_level)

    created = 0
    if growers.any():
        centers = scene.anchor[scene.seed_of_surfel_rows()] + scene.offset
        colors = sigmoid(scene.raw_color)
        surfel_grower = growers[scene.seed_of_surfel_rows()]
        target_level = scene.level[scene.seed_of_surfel_rows()] + 1
        for lvl in np.unique(target_level[surfel_grower]):
            voxel = base_voxel / (2.0 ** lvl)
            pick = surfel_grower & (target_level == lvl)
            cand_pos = centers[pick]
            cand_col = colors[pick]
            keys = _level_keys(cand_pos, voxel)
            # occupied voxels of existing seeds at this level
            at_level = scene.level == lvl
            occupied = set()
            if at_level.any():
                for key in _level_keys(scene.anchor[at_level], voxel):
                    occupied.add(tuple(key))
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            col_sum = np.zeros((uniq.shape[0], 3))
            for c in range(3):
                col_sum[:, c] = np.bincount(inverse, weights=cand_col[:, c],
                                            minlength=uniq.shape[0])
            counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
            col_mean = col_sum / counts[:, None]
            free = np.array([tuple(k) not in occupied for k in uniq], dtype=bool)
            if not free.any():
                continue
            anchors = uniq[free].astype(np.float64) * voxel + voxel / 2.0
            n_new = scene.add_seeds(anchors, level=int(lvl), voxel_size=voxel,
                                    rng=rng, colors=col_mean[free],
                                    iteration=iteration)
            created += n_new
            if optimizer is not None:
                optimizer.append_rows(n_new * scene.k)

    # reset only the pre-growth rows; freshly created seeds start clean
    scene.grad_accum[:n_before][processed] = 0.0
    scene.grad_count[:n_before][processed] = 0
    return created


def prune_seeds(
    scene: GaussianScene,
    config: DensifyConfig,
    iteration: int,
    optimizer=None,
) -> int:
    """Deactivate seeds with low windowed opacity contribution.

    Only seeds alive for a full prune window are eligible.  Never empties the
    scene: if every seed fails, the strongest one by accumulated opacity is
    kept and a warning is logged.  Survivors' opacity accumulators reset.
    Returns the number of seeds pruned.
    """
    if not config.in_window(iteration):
        return 0
    k = scene.k
    # a seed is judged on a full window of steady accumulation: seeds grown
    # mid-training get one extra ramp window first, since the pinned opacity
    # init cannot reach a window-mean of theta_alpha within a single window
    # even at the maximum per-step opacity change
    judged_from = np.maximum(scene.created_iter + config.prune_interval,
                             config.start_iter)
    eligible = judged_from <= iteration - config.prune_interval
    mean_op = scene.opacity_accum / (config.prune_interval * k)
    prune = eligible & (mean_op < config.prune_opacity)
    if prune.all() and scene.n_seeds > 0:
        keep = int(np.argmax(scene.opacity_accum))
        prune[keep] = False
        logger.warning(
            "pruning would empty the scene at iteration %d; keeping seed %d",
            iteration, int(scene.seed_uid[keep]))
    n_pruned = int(prune.sum())
    if n_pruned:
        surf_keep = scene.remove_seeds(np.flatnonzero(prune))
        if optimizer is not None:
            optimizer.select_rows(surf_keep)
    scene.opacity_accum[:] = 0.0
    return n_pruned
