"""Command-line surface.

Subcommands: synth, init, train, render, mesh, eval, verify.  Exit codes:
0 success, 1 usage error, 2 runtime error.  Configuration files are
line-oriented ``key = value`` text with dotted keys (``train.total_iters``,
``seed.voxel_size``, ...), overridable by flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, formats
from .dataset import load_dataset
from .meshing import TsdfConfig, reconstruct_mesh
from .rasterizer import render
from .scene import filter_points, voxelize_seeds
from .synthetic import SyntheticRoomSpec, generate_synthetic_room
from .trainer import Configs, fit, load_checkpoint, save_checkpoint, TrainState

__all__ = ["main", "cli"]

_CONFIG_SECTIONS = {
    "seed": "seed_config",
    "train": "train",
    "raster": "raster",
    "loss": "weights",
    "mv": "mv",
    "densify": "densify",
}


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _coerce(current, text: str):
    if isinstance(current, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(type(current[0])(p) for p in parts)
    return text


def apply_config_overrides(configs: Configs, values: dict[str, str]) -> Configs:
    """Apply dotted ``section.field`` overrides onto the config bundle."""
    for key, text in values.items():
        if "." not in key:
            raise ValueError(f"config key '{key}' must look like 'section.field'")
        section, field_name = key.split(".", 1)
        if section not in _CONFIG_SECTIONS:
            raise ValueError(f"unknown config section '{section}' in '{key}'")
        obj = getattr(configs, _CONFIG_SECTIONS[section])
        if not hasattr(obj, field_name):
            raise ValueError(f"unknown config field '{key}'")
        setattr(obj, field_name, _coerce(getattr(obj, field_name), text))
    # re-validate dataclass invariants
    for attr in _CONFIG_SECTIONS.values():
        obj = getattr(configs, attr)
        obj.__post_init__()
    return configs


def _load_configs(config_path: str | None, overrides: dict[str, str]) -> Configs:
    configs = Configs()
    if config_path:
        text = Path(config_path).read_text(encoding="utf-8")
        apply_config_overrides(configs, formats.parse_config_text(text))
    apply_config_overrides(configs, overrides)
    return configs


def _spec_from_arg(spec_arg: str) -> SyntheticRoomSpec:
    if spec_arg == "default":
        return SyntheticRoomSpec()
    values = formats.parse_config_text(Path(spec_arg).read_text(encoding="utf-8"))
    spec = SyntheticRoomSpec()
    fields = {f.name: f for f in dataclasses.fields(SyntheticRoomSpec)}
    kwargs = {}
    for key, text in values.items():
        if key not in fields:
            raise ValueError(f"unknown synthetic-room key '{key}'")
        kwargs[key] = _coerce(getattr(spec, key), text)
    return dataclasses.replace(spec, **kwargs)


def _init_scene(manifest: str, configs: Configs, seed: int):
    ds = load_dataset(manifest)
    if not ds.points:
        raise ValueError("dataset has no point cloud; seed init needs one")
    pts = filter_points(ds.points, configs.seed_config.min_matches)
    if not pts:
        raise ValueError("no points after filtering")
    scene = voxelize_seeds(pts, configs.seed_config, np.random.default_rng(seed))
    return ds, scene


# -- subcommand handlers -------------------------------------------------------

def _cmd_synth(args) -> int:
    spec = _spec_from_arg(args.spec)
    out_dir = Path(args.out_dir)
    ds, verts, tris = generate_synthetic_room(spec, out_dir=out_dir)
    print(f"wrote {len(ds.frames)} views, {len(ds.points)} points, "
          f"GT mesh with {len(tris)} triangles to {out_dir}")
    return 0


def _cmd_init(args) -> int:
    configs = _load_configs(args.config, {})
    if args.delta is not None:
        configs.seed_config.voxel_size = args.delta
    if args.epsilon is not None:
        configs.seed_config.min_matches = args.epsilon
    if args.k is not None:
        configs.seed_config.surfels_per_seed = args.k
    configs.seed_config.__post_init__()
    ds, scene = _init_scene(args.manifest, configs, args.seed)
    out = args.out or str(Path(args.manifest).parent / "scene_init.splat")
    state = TrainState.create(scene, ds, configs.train)
    save_checkpoint(out, scene, state, configs, str(args.manifest))
    print(f"initialized {scene.n_seeds} seeds / {scene.n_surfels} surfels "
          f"(voxel {configs.seed_config.voxel_size} m, "
          f"min_matches {configs.seed_config.min_matches}, "
          f"k {configs.seed_config.surfels_per_seed}) -> {out}")
    return 0


def _cmd_train(args) -> int:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    configs = _load_configs(args.config, {k.strip(): v.strip()
                                          for k, v in overrides.items()})
    if args.iters is not None:
        configs.train.total_iters = args.iters
    ds, scene = _init_scene(args.manifest, configs, configs.train.seed)
    out_dir = args.out or str(Path(args.manifest).parent / "run")
    print(f"training {configs.train.total_iters} iterations on "
          f"{len(ds.frames)} views ({scene.n_seeds} seeds, "
          f"{scene.n_surfels} surfels)")
    fit(scene, ds, configs, out_dir=out_dir,
        log_every=max(configs.train.total_iters // 10, 1))
    print(f"final scene: {scene.n_seeds} seeds / {scene.n_surfels} surfels; "
          f"checkpoints in {out_dir}")
    return 0


def _cmd_render(args) -> int:
    scene, state, configs, manifest_path = load_checkpoint(args.checkpoint)
    manifest = args.manifest or manifest_path
    if manifest is None:
        raise ValueError("checkpoint carries no manifest path; pass --manifest")
    ds = load_dataset(manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = scene.snapshot()
    targets = ds.frames if args.camera == "all" else \
        [f for f in ds.frames if f.frame_id == args.camera]
    if not targets:
        raise ValueError(f"no frame with id {args.camera!r} in the manifest")
    for frame in targets:
        out = render(snapshot, frame.camera, configs.raster)
        stem = out_dir / frame.frame_id
        formats.write_png(f"{stem}_color.png", out.color)
        formats.write_pfm(f"{stem}_depth.pfm", out.depth)
        formats.write_pfm(f"{stem}_normal.pfm", out.normal)
        formats.write_pfm(f"{stem}_alpha.pfm", out.alpha)
    print(f"rendered {len(targets)} view(s) into {out_dir}")
    return 0


def _cmd_mesh(args) -> int:
    scene, state, configs, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.manifest)
    tsdf = TsdfConfig()
    if args.voxel is not None:
        tsdf.voxel_size = args.voxel
        tsdf.truncation = 5.0 * args.voxel
    if args.trunc is not None:
        tsdf.truncation = args.trunc
    tsdf.__post_init__()
    mesh = reconstruct_mesh(scene, ds, tsdf, configs.raster, out_path=args.out_ply)
    print(f"extracted mesh: {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles -> {args.out_ply}")
    return 0


def _cmd_eval(args) -> int:
    cfg = evaluation.EvalConfig(
        threshold=args.threshold if args.threshold is not None else 0.05,
        n_samples=args.samples if args.samples is not None else 100000,
        seed=args.seed)
    pred = evaluation.load_geometry_points(args.pred, cfg.n_samples, cfg.seed)
    gt = evaluation.load_geometry_points(args.gt, cfg.n_samples, cfg.seed)
    metrics = evaluation.compute_metrics(pred, gt, cfg)
    report = evaluation.metrics_report(metrics)
    print(report)
    if args.json:
        Path(args.json).write_text(report + "\n", encoding="utf-8")
    return 0


def _cmd_verify(args) -> int:
    from .diagnostics import run_equivalence_suite, run_gradient_suite
    reports = run_gradient_suite(args.seed) + run_equivalence_suite(args.seed)
    for rep in reports:
        print(rep.line())
    n_fail = sum(not r.passed for r in reports)
    print(f"{len(reports) - n_fail}/{len(reports)} checks passed")
    if args.json:
        doc = [dataclasses.asdict(r) for r in reports]
        Path(args.json).write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return 0 if n_fail == 0 else 2


def _build_parser() -> _Parser:
    parser = _Parser(prog="splatroom",
                     description="Seed-guided 2D Gaussian surfel reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic room dataset")
    p.add_argument("spec", help="room spec file (key = value) or 'default'")
    p.add_argument("out_dir")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("init", help="seed-initialize a scene from a manifest")
    p.add_argument("manifest")
    p.add_argument("--delta", type=float, help="voxel size (m)")
    p.add_argument("--epsilon", type=int, help="match-count threshold")
    p.add_argument("--k", type=int, help="surfels per seed")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output checkpoint path")
    p.set_defaults(fn=_cmd_init)

    p = sub.add_parser("train", help="initialize and optimize a scene")
    p.add_argument("manifest")
    p.add_argument("--iters", type=int)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="inline config override (repeatable)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("render", help="render maps from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("camera", help="frame id or 'all'")
    p.add_argument("out_dir")
    p.add_argument("--manifest", help="override the manifest recorded in the checkpoint")
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("mesh", help="TSDF-fuse and extract a mesh")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out_ply")
    p.add_argument("--voxel", type=float, help="TSDF voxel size (m)")
    p.add_argument("--trunc", type=float, help="TSDF truncation (m)")
    p.set_defaults(fn=_cmd_mesh)

    p = sub.add_parser("eval", help="compare predicted and GT geometry")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--threshold", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the metrics report here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("verify", help="run the oracle verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the reports here")
    p.set_defaults(fn=_cmd_verify)
    return parser


def cli(argv: list[str] | None = None) -> int:
    """Run the CLI; returns the exit code (0 ok, 1 usage, 2 runtime)."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"splatroom: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
