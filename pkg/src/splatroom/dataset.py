"""Dataset ingestion: JSON manifest, images, priors, cameras, point cloud.

The manifest declares the camera convention and measurement units; loading
validates every referenced file and reports all problems in one error.
Prior normal maps carry a sidecar metadata file declaring their frame
(camera or world); world-frame normals are rotated into camera frame here
so downstream code only ever sees camera-frame unit normals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .scene import Camera, SfmPoint

__all__ = [
    "CONVENTION",
    "FrameBundle",
    "Dataset",
    "DatasetError",
    "load_dataset",
    "save_manifest",
    "load_point_cloud",
]

CONVENTION = "right-handed,+z-forward,top-left-origin,half-integer-pixel-centers"


class DatasetError(ValueError):
    """Aggregated per-frame validation failures."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("dataset validation failed:\n" + "\n".join(problems))


@dataclass
class FrameBundle:
    """One training view: image, camera, and optional priors (camera frame)."""

    frame_id: str
    camera: Camera
    image: np.ndarray                       # (H, W, 3) in [0, 1]
    depth_prior: np.ndarray | None = None   # (H, W) meters
    depth_valid: np.ndarray | None = None   # (H, W) bool
    normal_prior: np.ndarray | None = None  # (H, W, 3) unit, camera frame
    normal_valid: np.ndarray | None = None  # (H, W) bool


@dataclass
class Dataset:
    frames: list[FrameBundle]
    points: list[SfmPoint]
    manifest_path: str | None = None
    cameras: dict[str, Camera] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)


def _camera_from_dict(d: dict) -> Camera:
    K = np.array([[d["fx"], 0.0, d["cx"]], [0.0, d["fy"], d["cy"]], [0, 0, 1.0]])
    return Camera(K=K, R_wc=np.asarray(d["R_wc"], dtype=np.float64),
                  t_wc=np.asarray(d["t_wc"], dtype=np.float64),
                  width=int(d["width"]), height=int(d["height"]))


def _camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "R_wc": cam.R_wc.tolist(), "t_wc": cam.t_wc.tolist(),
            "width": cam.width, "height": cam.height}


def load_point_cloud(path, default_match_count: int | None = None) -> list[SfmPoint]:
    """Point-cloud PLY to SfmPoint records.

    A missing ``match_count`` property falls back to ``default_match_count``
    (callers pass their confidence threshold so absent counts keep all points).
    """
    ply = formats.read_ply(path)
    v = ply["vertex"]
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    n = pos.shape[0]
    if "match_count" in v:
        counts = np.asarray(v["match_count"], dtype=np.int64)
    else:
        counts = np.full(n, default_match_count if default_match_count is not None else 0,
                         dtype=np.int64)
    colors = None
    if all(c in v for c in ("red", "green", "blue")):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    points = []
    for i in range(n):
        points.append(SfmPoint(position=pos[i], match_count=int(counts[i]),
                               color=None if colors is None else colors[i]))
    return points


def save_manifest(path, cameras: dict[str, Camera], frames: list[dict],
                  point_cloud: str) -> None:
    """Write the dataset manifest JSON.

    ``frames`` entries: {"id", "camera", "image", optional "depth",
    "depth_scale", "normal"}; paths are relative to the manifest.
    """
    doc = {
        "units": "meters",
        "convention": CONVENTION,
        "point_cloud": point_cloud,
        "cameras": {cid: _camera_to_dict(cam) for cid, cam in cameras.items()},
        "frames": frames,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset; raises :class:`DatasetError` listing every
    problem found (missing files, dimension mismatches, non-unit normals)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    with open(manifest_path, "r", encoding="utf-8") as f:
        doc = json.load(f)

    problems: list[str] = []
    if doc.get("convention") != CONVENTION:
        problems.append(f"manifest: camera convention {doc.get('convention')!r} "
                        f"does not match {CONVENTION!r}")
    if doc.get("units") != "meters":
        problems.append(f"manifest: units must be 'meters', got {doc.get('units')!r}")

    cameras: dict[str, Camera] = {}
    for cid, cd in doc.get("cameras", {}).items():
        try:
            cameras[cid] = _camera_from_dict(cd)
        except (KeyError, ValueError) as exc:
            problems.append(f"camera {cid}: {exc}")

    points: list[SfmPoint] = []
    pc_rel = doc.get("point_cloud")
    if pc_rel:
        pc_path = root / pc_rel
        if not pc_path.exists():
            problems.append(f"point cloud missing: {pc_path}")
        else:
            points = load_point_cloud(pc_path)

    frames: list[FrameBundle] = []
    for fd in doc.get("frames", []):
        fid = fd.get("id", "?")
        cam = cameras.get(fd.get("camera"))
        if cam is None:
            problems.append(f"frame {fid}: unknown camera {fd.get('camera')!r}")
            continue
        img_path = root / fd["image"]
        if not img_path.exists():
            problems.append(f"frame {fid}: image missing: {img_path}")
            continue
        image = formats.read_png(img_path)
        if image.shape[:2] != (cam.height, cam.width):
            problems.append(f"frame {fid}: image is {image.shape[1]}x{image.shape[0]}, "
                            f"camera says {cam.width}x{cam.height}")
            continue
        bundle = FrameBundle(frame_id=fid, camera=cam, image=image)

        if fd.get("depth"):
            dp = root / fd["depth"]
            if not dp.exists():
                problems.append(f"frame {fid}: depth prior missing: {dp}")
            else:
                scale = float(fd.get("depth_scale", 1.0))
                if dp.suffix == ".pfm":
                    depth = formats.read_pfm(dp).astype(np.float64) * scale
                else:
                    depth = formats.read_depth_png16(dp, scale)
                if depth.shape != (cam.height, cam.width):
                    problems.append(f"frame {fid}: depth prior shape {depth.shape} "
                                    f"mismatches camera {cam.height}x{cam.width}")
                else:
                    bundle.depth_prior = depth
                    bundle.depth_valid = np.isfinite(depth) & (depth > 0)

        if fd.get("normal"):
            npth = root / fd["normal"]
            if not npth.exists():
                problems.append(f"frame {fid}: normal prior missing: {npth}")
            else:
                normal = formats.read_pfm(npth).astype(np.float64)
                meta_path = Path(str(npth) + ".json")
                frame_tag = "camera"
                if meta_path.exists():
                    with open(meta_path, "r", encoding="utf-8") as mf:
                        frame_tag = json.load(mf).get("frame", "camera")
                if frame_tag not in ("camera", "world"):
                    problems.append(f"frame {fid}: normal frame tag {frame_tag!r} invalid")
                    frame_tag = "camera"
                if normal.shape != (cam.height, cam.width, 3):
                    problems.append(f"frame {fid}: normal prior shape {normal.shape} "
                                    f"mismatches camera")
                else:
                    norms = np.linalg.norm(normal, axis=-1)
                    valid = norms > 1e-6
                    off_unit = valid & (np.abs(norms - 1.0) > 1e-3)
                    if off_unit.any():
                        problems.append(
                            f"frame {fid}: {int(off_unit.sum())} prior normals deviate "
                            f"from unit length by more than 1e-3")
                    else:
                        if frame_tag == "world":
                            normal = normal @ cam.R_wc.T
                        bundle.normal_prior = normal
                        bundle.normal_valid = valid
        frames.append(bundle)

    if problems:
        raise DatasetError(problems)
    return Dataset(frames=frames, points=points,
                   manifest_path=str(manifest_path), cameras=cameras)
