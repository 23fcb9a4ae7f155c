"""Optimization loop: view sampling, render, losses, backward, Adam update,
densification schedule, checkpointing, and the loss log.

Determinism contract: given the same seed and configs, two runs produce
bitwise-identical checkpoints.  All reductions are fixed-order numpy
operations, so the results are independent of BLAS/OpenMP thread counts.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .densify import DensifyConfig, grow_seeds, prune_seeds
from .gradients import accumulate_seed_stats, backward
from .losses import (LossWeights, MvConfig, depth_loss, mv_consistency_loss,
                     normal_loss, rgb_loss, select_neighbor_view, total_loss)
from .rasterizer import RasterConfig, render
from .scene import GaussianScene, SeedConfig

__all__ = [
    "TrainConfig",
    "TrainState",
    "Configs",
    "Adam",
    "NonFiniteLossError",
    "train_step",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"SPLATROOM1"
_PARAM_GROUPS = ("offset", "quat", "log_scale", "raw_opacity", "raw_color")


@dataclass
class TrainConfig:
    """Optimizer schedule; learning rates follow splatting-system defaults."""

    total_iters: int = 30000
    lr_offset: float = 0.00016          # scaled by scene extent, exp-decayed
    lr_offset_final_ratio: float = 0.01  # decays to lr_offset * ratio at the end
    lr_rotation: float = 0.001
    lr_scale: float = 0.005
    lr_opacity: float = 0.05
    lr_color: float = 0.0025
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    checkpoint_every: int = 5000

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        for name in ("lr_offset", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Configs:
    """Bundle of every stage's configuration."""

    seed_config: SeedConfig = field(default_factory=SeedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    mv: MvConfig = field(default_factory=MvConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def to_dict(self) -> dict:
        return {
            "seed_config": asdict(self.seed_config),
            "train": asdict(self.train),
            "raster": asdict(self.raster),
            "weights": asdict(self.weights),
            "mv": asdict(self.mv),
            "densify": asdict(self.densify),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Configs":
        return cls(
            seed_config=SeedConfig(**d["seed_config"]),
            train=TrainConfig(**d["train"]),
            raster=RasterConfig(**d["raster"]),
            weights=LossWeights(**d["weights"]),
            mv=MvConfig(**d["mv"]),
            densify=DensifyConfig(**d["densify"]),
        )


class NonFiniteLossError(RuntimeError):
    """A loss term went non-finite; carries the term name and view id."""

    def __init__(self, term: str, view_id: str, value: float, iteration: int):
        self.term = term
        self.view_id = view_id
        self.iteration = iteration
        super().__init__(
            f"non-finite loss term '{term}' (value {value}) on view {view_id} "
            f"at iteration {iteration}")


class Adam:
    """Per-group Adam whose moment rows mirror the live surfel rows."""

    def __init__(self, scene: GaussianScene, config: TrainConfig):
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.m = {g: np.zeros_like(getattr(scene, g)) for g in _PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(scene, g)) for g in _PARAM_GROUPS}

    def append_rows(self, n: int) -> None:
        for g in _PARAM_GROUPS:
            pad = np.zeros((n,) + self.m[g].shape[1:])
            self.m[g] = np.concatenate([self.m[g], pad])
            self.v[g] = np.concatenate([self.v[g], pad])

    def select_rows(self, keep: np.ndarray) -> None:
        for g in _PARAM_GROUPS:
            self.m[g] = self.m[g][keep]
            self.v[g] = self.v[g][keep]

    def check_alignment(self, scene: GaussianScene) -> None:
        for g in _PARAM_GROUPS:
            if self.m[g].shape != getattr(scene, g).shape:
                raise AssertionError(f"optimizer moments for '{g}' misaligned")

    def step(self, scene: GaussianScene, grads: dict[str, np.ndarray],
             lrs: dict[str, float], t: int) -> None:
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for g in _PARAM_GROUPS:
            grad = grads[g]
            self.m[g] = self.beta1 * self.m[g] + (1.0 - self.beta1) * grad
            self.v[g] = self.beta2 * self.v[g] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[g] / bc1
            v_hat = self.v[g] / bc2
            getattr(scene, g)[...] -= lrs[g] * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    """Mutable optimization state owned by the orchestrator."""

    iteration: int
    optimizer: Adam
    rng: np.random.Generator
    extent: float
    view_order: np.ndarray
    view_cursor: int
    loss_history: list = field(default_factory=list)

    @classmethod
    def create(cls, scene: GaussianScene, dataset: Dataset,
               config: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(config.seed)
        if scene.n_seeds:
            span = scene.anchor.max(axis=0) - scene.anchor.min(axis=0)
            extent = float(np.linalg.norm(span))
        else:
            extent = 1.0
        extent = max(extent, 1e-6)
        order = rng.permutation(len(dataset.frames))
        return cls(iteration=0, optimizer=Adam(scene, config), rng=rng,
                   extent=extent, view_order=order, view_cursor=0)

    def next_view(self, n_frames: int) -> int:
        if self.view_cursor >= len(self.view_order):
            self.view_order = self.rng.permutation(n_frames)
            self.view_cursor = 0
        idx = int(self.view_order[self.view_cursor])
        self.view_cursor += 1
        return idx


def offset_lr(config: TrainConfig, extent: float, iteration: int) -> float:
    """Exponential (log-linear) decay of the offset learning rate."""
    frac = min(max(iteration / max(config.total_iters, 1), 0.0), 1.0)
    return config.lr_offset * extent * (config.lr_offset_final_ratio ** frac)


def _lrs(config: TrainConfig, extent: float, iteration: int) -> dict[str, float]:
    return {
        "offset": offset_lr(config, extent, iteration),
        "quat": config.lr_rotation,
        "log_scale": config.lr_scale,
        "raw_opacity": config.lr_opacity,
        "raw_color": config.lr_color,
    }


def train_step(state: TrainState, scene: GaussianScene, dataset: Dataset,
               configs: Configs) -> dict:
    """One optimization step; returns the step report."""
    it = state.iteration + 1
    w = configs.weights
    frame_idx = state.next_view(len(dataset.frames))
    frame = dataset.frames[frame_idx]
    snapshot = scene.snapshot()
    out, ctx = render(snapshot, frame.camera, configs.raster, return_context=True)

    terms: dict[str, float | None] = {"rgb": None, "depth": None, "normal": None, "mv": None}
    g_color = np.zeros_like(out.color)
    g_depth = np.zeros_like(out.depth)
    g_normal = np.zeros_like(out.normal)

    val, grad = rgb_loss(out.color, frame.image, w)
    terms["rgb"] = val
    g_color += w.lambda_rgb * grad

    alpha_ok = out.alpha > configs.raster.alpha_valid_threshold
    if frame.depth_prior is not None and w.lambda_d > 0:
        valid = frame.depth_valid & alpha_ok
        if valid.sum() >= 2:
            val, grad, _, _ = depth_loss(out.depth, frame.depth_prior, valid, w)
            terms["depth"] = val
            g_depth += w.lambda_d * grad
        else:
            terms["depth"] = 0.0
    if frame.normal_prior is not None and w.lambda_n > 0:
        valid = frame.normal_valid & alpha_ok
        val, grad = normal_loss(out.normal, frame.normal_prior, valid, w)
        terms["normal"] = val
        g_normal += w.lambda_n * grad

    nbr_grads = None
    nbr_frame = None
    nbr_out = nbr_ctx = None
    if (it >= configs.mv.start_iter and len(dataset.frames) >= 2
            and (w.lambda_geo > 0 or w.lambda_pho > 0)):
        cams = [f.camera for f in dataset.frames]
        nbr_idx = select_neighbor_view(cams, frame_idx)
        if nbr_idx is not None:
            nbr_frame = dataset.frames[nbr_idx]
            nbr_out, nbr_ctx = render(snapshot, nbr_frame.camera, configs.raster,
                                      return_context=True)
            val, mv_grads, _, _ = mv_consistency_loss(frame, nbr_frame, out, nbr_out,
                                                      configs.mv, w)
            terms["mv"] = val
            g_depth += mv_grads["r"]["depth"]
            g_normal += mv_grads["r"]["normal"]
            nbr_grads = mv_grads["n"]

    for name, val in terms.items():
        if val is not None and not np.isfinite(val):
            raise NonFiniteLossError(name, frame.frame_id, val, it)
    total = total_loss(terms, w)

    grads = backward(snapshot, frame.camera, out,
                     {"color": g_color, "depth": g_depth, "normal": g_normal},
                     configs.raster, context=ctx)
    if nbr_grads is not None:
        g2 = backward(snapshot, nbr_frame.camera, nbr_out,
                      {"depth": nbr_grads["depth"], "normal": nbr_grads["normal"]},
                      configs.raster, context=nbr_ctx)
        grads.offset += g2.offset
        grads.rotation += g2.rotation
        grads.log_scale += g2.log_scale
        grads.raw_opacity += g2.raw_opacity
        grads.raw_color += g2.raw_color
        grads.g_screen += g2.g_screen

    if configs.densify.in_window(it):
        accumulate_seed_stats(grads, scene)

    state.optimizer.step(
        scene,
        {"offset": grads.offset, "quat": grads.rotation, "log_scale": grads.log_scale,
         "raw_opacity": grads.raw_opacity, "raw_color": grads.raw_color},
        _lrs(configs.train, state.extent, it), it)
    scene.normalize_rotations()

    grown = pruned = 0
    densify_ran = False
    if configs.densify.in_window(it):
        if it % configs.densify.grow_interval == 0:
            grown = grow_seeds(scene, configs.densify, it, state.rng,
                               optimizer=state.optimizer)
            densify_ran = True
        if it % configs.densify.prune_interval == 0:
            pruned = prune_seeds(scene, configs.densify, it,
                                 optimizer=state.optimizer)
            densify_ran = True
        if densify_ran:
            state.optimizer.check_alignment(scene)
            scene.check_integrity()

    state.iteration = it
    report = {
        "iteration": it,
        "view": frame.frame_id,
        "rgb": None if terms["rgb"] is None else float(terms["rgb"]),
        "depth": None if terms["depth"] is None else float(terms["depth"]),
        "normal": None if terms["normal"] is None else float(terms["normal"]),
        "mv": None if terms["mv"] is None else float(terms["mv"]),
        "total": float(total),
        "seeds": scene.n_seeds,
        "surfels": scene.n_surfels,
        "grown": grown,
        "pruned": pruned,
        "densify_ran": densify_ran,
    }
    state.loss_history.append(report)
    return report


def fit(scene: GaussianScene, dataset: Dataset, configs: Configs,
        out_dir=None, log_every: int = 0):
    """Run the full schedule; returns (scene, reports).

    Writes periodic and final checkpoints plus a CSV loss log when
    ``out_dir`` is given.
    """
    state = TrainState.create(scene, dataset, configs.train)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    reports = []
    for _ in range(configs.train.total_iters):
        report = train_step(state, scene, dataset, configs)
        reports.append(report)
        if log_every and report["iteration"] % log_every == 0:
            print(f"iter {report['iteration']:6d} total {report['total']:.5f} "
                  f"seeds {report['seeds']} surfels {report['surfels']}")
        if (out_path is not None and configs.train.checkpoint_every > 0
                and report["iteration"] % configs.train.checkpoint_every == 0):
            save_checkpoint(out_path / f"ckpt_{report['iteration']:06d}.splat",
                            scene, state, configs, dataset.manifest_path)
    if out_path is not None:
        save_checkpoint(out_path / "ckpt_final.splat", scene, state, configs,
                        dataset.manifest_path)
        write_loss_log(out_path / "loss_log.csv", reports)
    return scene, reports


def write_loss_log(path, reports: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "rgb", "depth", "normal", "mv", "total",
                         "seeds", "surfels"])
        for r in reports:
            writer.writerow([
                r["iteration"],
                *(("" if r[k] is None else repr(r[k]))
                  for k in ("rgb", "depth", "normal", "mv", "total")),
                r["seeds"], r["surfels"],
            ])


# -- checkpoint container ------------------------------------------------------

_SCENE_ARRAYS = [
    "seed_uid", "anchor", "level", "created_iter", "grad_accum", "grad_count",
    "opacity_accum", "surfel_uid", "offset", "quat", "log_scale",
    "raw_opacity", "raw_color",
]


def save_checkpoint(path, scene: GaussianScene, state: TrainState,
                    configs: Configs, manifest_path: str | None) -> None:
    """Versioned little-endian binary container with configs, scene arrays,
    optimizer moments, and RNG state."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name in _SCENE_ARRAYS:
        arrays.append((f"scene.{name}", getattr(scene, name)))
    for g in _PARAM_GROUPS:
        arrays.append((f"adam.m.{g}", state.optimizer.m[g]))
        arrays.append((f"adam.v.{g}", state.optimizer.v[g]))
    arrays.append(("state.view_order", state.view_order.astype(np.int64)))

    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "version": 1,
        "iteration": state.iteration,
        "configs": configs.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "extent": state.extent,
        "view_cursor": state.view_cursor,
        "surfels_per_seed": scene.k,
        "next_seed_uid": scene._next_seed_uid,
        "next_surfel_uid": scene._next_surfel_uid,
        "manifest_path": manifest_path,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", 1, len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Restore (scene, state, configs, manifest_path) from a checkpoint."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a splatroom checkpoint")
        version, head_len = struct.unpack("<II", f.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(head_len).decode("utf-8"))
        payload = f.read()

    def get(name):
        meta = next(m for m in header["arrays"] if m["name"] == name)
        raw = payload[meta["offset"]: meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(meta["dtype"]).newbyteorder("<"))
        return arr.reshape(meta["shape"]).astype(np.dtype(meta["dtype"]))

    configs = Configs.from_dict(header["configs"])
    scene = GaussianScene(configs.seed_config)
    scene.k = int(header.get("surfels_per_seed", configs.seed_config.surfels_per_seed))
    for name in _SCENE_ARRAYS:
        setattr(scene, name, get(f"scene.{name}"))
    scene._next_seed_uid = header["next_seed_uid"]
    scene._next_surfel_uid = header["next_surfel_uid"]
    scene._rebuild_maps()

    state = TrainState(
        iteration=header["iteration"],
        optimizer=Adam(scene, configs.train),
        rng=np.random.default_rng(0),
        extent=header["extent"],
        view_order=get("state.view_order"),
        view_cursor=header["view_cursor"],
    )
    for g in _PARAM_GROUPS:
        state.optimizer.m[g] = get(f"adam.m.{g}")
        state.optimizer.v[g] = get(f"adam.v.{g}")
    state.rng.bit_generator.state = header["rng_state"]
    return scene, state, configs, header.get("manifest_path")
