"""Synthetic textured-box datasets: analytic renders, exact priors, ground
truth mesh, and a sparse wall-sampled point cloud.

The room is an axis-aligned box centered at the origin, viewed from inside.
Rendered images, depth maps, and camera-frame normal maps come from exact
ray/box intersection, so they double as oracles for the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .dataset import Dataset, FrameBundle, save_manifest
from .scene import Camera, SfmPoint

__all__ = ["SyntheticRoomSpec", "generate_synthetic_room", "render_box_view",
           "box_mesh", "ring_cameras"]

# per-face base palettes (checker light/dark), one pair per face index
_FACE_PALETTES = np.array([
    [[0.92, 0.86, 0.78], [0.35, 0.22, 0.16]],   # +x
    [[0.85, 0.90, 0.80], [0.20, 0.32, 0.18]],   # -x
    [[0.80, 0.84, 0.93], [0.16, 0.22, 0.38]],   # +y
    [[0.93, 0.82, 0.86], [0.38, 0.18, 0.26]],   # -y
    [[0.88, 0.88, 0.88], [0.42, 0.40, 0.38]],   # +z ceiling
    [[0.75, 0.70, 0.62], [0.30, 0.26, 0.20]],   # -z floor
])


@dataclass
class SyntheticRoomSpec:
    """Recipe for one synthetic room dataset."""

    extents: tuple[float, float, float] = (3.0, 3.0, 2.5)  # W x D x H meters
    texture: str = "checker"            # checker | gradient-noise
    n_views: int = 24
    trajectory: str = "circle"          # circle | grid
    image_width: int = 64
    image_height: int = 48
    fov_deg: float = 70.0
    checker_size: float = 0.75          # texture cell edge, meters
    ring_radius_frac: float = 0.3       # circle radius as fraction of min(W, D)
    pitch_deg: float = 25.0             # alternating camera pitch
    n_points: int = 3000
    point_sigma: float = 0.0            # point cloud position noise, meters
    depth_sigma: float = 0.0            # multiplicative depth prior noise
    normal_jitter_deg: float = 0.0      # angular normal prior noise
    depth_prior_affine: tuple[float, float] = (1.0, 0.0)  # stored = a*gt + b
    seed: int = 0

    def __post_init__(self):
        if min(self.extents) <= 0:
            raise ValueError("extents must be positive")
        if self.n_views < 2:
            raise ValueError("need at least 2 views")
        if self.texture not in ("checker", "gradient-noise"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.trajectory not in ("circle", "grid"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")


# face index -> (axis, sign); inward normal is -sign along axis
_FACES = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]


def _face_uv(face: int, pts: np.ndarray) -> np.ndarray:
    axis, _ = _FACES[face]
    others = [a for a in range(3) if a != axis]
    return pts[..., others]


def _noise_lattice(spec: SyntheticRoomSpec, face: int, shape: tuple[int, int]) -> np.ndarray:
    rng = np.random.default_rng(spec.seed * 1009 + face)
    return rng.uniform(0.0, 1.0, shape)


def _texture_color(spec: SyntheticRoomSpec, face: int, uv: np.ndarray) -> np.ndarray:
    """Albedo at face-local coordinates (meters)."""
    pal = _FACE_PALETTES[face]
    cs = spec.checker_size
    if spec.texture == "checker":
        parity = (np.floor(uv[..., 0] / cs) + np.floor(uv[..., 1] / cs)).astype(np.int64) & 1
        return np.where(parity[..., None] == 0, pal[0], pal[1])
    # gradient-noise: bilinear value noise on a seeded lattice
    axis, _ = _FACES[face]
    others = [a for a in range(3) if a != axis]
    ext = np.asarray(spec.extents)
    lo = -ext[others] / 2.0
    n0 = int(np.ceil(ext[others][0] / cs)) + 2
    n1 = int(np.ceil(ext[others][1] / cs)) + 2
    lat = _noise_lattice(spec, face, (n0 + 1, n1 + 1))
    g0 = np.clip((uv[..., 0] - lo[0]) / cs, 0, n0 - 1e-9)
    g1 = np.clip((uv[..., 1] - lo[1]) / cs, 0, n1 - 1e-9)
    i0 = g0.astype(np.int64)
    i1 = g1.astype(np.int64)
    f0 = g0 - i0
    f1 = g1 - i1
    val = (lat[i0, i1] * (1 - f0) * (1 - f1) + lat[i0 + 1, i1] * f0 * (1 - f1)
           + lat[i0, i1 + 1] * (1 - f0) * f1 + lat[i0 + 1, i1 + 1] * f0 * f1)
    mix = 0.25 + 0.75 * val[..., None]
    return pal[0] * mix + pal[1] * (1.0 - mix)


def render_box_view(spec: SyntheticRoomSpec, camera: Camera):
    """Exact render of the box interior for one camera.

    Returns (rgb, depth, normal) where depth is camera-z and the normals are
    unit camera-frame vectors of the hit faces (facing the camera).
    """
    h, w = camera.height, camera.width
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dirs_cam = np.stack([(xs - camera.cx) / camera.fx,
                         (ys - camera.cy) / camera.fy,
                         np.ones_like(xs)], axis=-1)
    dirs_w = dirs_cam @ camera.R_wc  # row-vector form of R_wc^T @ dir
    origin = camera.center()
    half = np.asarray(spec.extents) / 2.0

    t_exit = np.full((h, w), np.inf)
    face_idx = np.zeros((h, w), dtype=np.int64)
    for fi, (axis, sign) in enumerate(_FACES):
        d = dirs_w[..., axis]
        bound = sign * half[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (bound - origin[axis]) / d
        hit = (np.sign(d) == sign) & (t > 0) & (t < t_exit)
        t_exit = np.where(hit, t, t_exit)
        face_idx = np.where(hit, fi, face_idx)

    depth = t_exit  # dirs_cam z-component is 1, so camera depth equals t
    pts = origin + t_exit[..., None] * dirs_w
    rgb = np.zeros((h, w, 3))
    normal = np.zeros((h, w, 3))
    for fi, (axis, sign) in enumerate(_FACES):
        m = face_idx == fi
        if not m.any():
            continue
        uv = _face_uv(fi, pts[m])
        rgb[m] = _texture_color(spec, fi, uv)
        n_world = np.zeros(3)
        n_world[axis] = -sign  # inward
        normal[m] = camera.R_wc @ n_world
    return rgb, depth, normal


def box_mesh(extents) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box interior as 8 vertices and 12 triangles."""
    half = np.asarray(extents, dtype=np.float64) / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                       dtype=np.float64) * half
    quads = [
        (4, 5, 7, 6),  # +x
        (0, 2, 3, 1),  # -x
        (2, 6, 7, 3),  # +y
        (0, 1, 5, 4),  # -y
        (1, 3, 7, 5),  # +z
        (0, 4, 6, 2),  # -z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return corners, np.asarray(faces, dtype=np.int64)


def _look_rotation(forward: np.ndarray) -> np.ndarray:
    """World-to-camera rotation with +z = forward, image y pointing down."""
    f = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    rn = np.linalg.norm(r)
    if rn < 1e-9:
        r = np.array([1.0, 0.0, 0.0])
    else:
        r = r / rn
    d = np.cross(f, r)
    return np.stack([r, d, f], axis=0)


def ring_cameras(spec: SyntheticRoomSpec) -> list[Camera]:
    """Cameras on the requested trajectory, looking inward through the center.

    Pitch alternates 0 / +pitch / -pitch around the ring so floor and ceiling
    are covered without extra trajectories.
    """
    w, h = spec.image_width, spec.image_height
    fx = (w / 2.0) / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    K = np.array([[fx, 0, w / 2.0], [0, fx, h / 2.0], [0, 0, 1.0]])
    ext = np.asarray(spec.extents)
    positions = []
    if spec.trajectory == "circle":
        radius = spec.ring_radius_frac * min(ext[0], ext[1])
        for i in range(spec.n_views):
            ang = 2.0 * np.pi * i / spec.n_views
            positions.append(np.array([radius * np.cos(ang), radius * np.sin(ang), 0.0]))
    else:  # grid
        side = int(np.ceil(np.sqrt(spec.n_views)))
        lin_x = np.linspace(-0.3 * ext[0], 0.3 * ext[0], side)
        lin_y = np.linspace(-0.3 * ext[1], 0.3 * ext[1], side)
        for i in range(spec.n_views):
            positions.append(np.array([lin_x[i % side], lin_y[i // side], 0.0]))
    arr = np.asarray(positions)
    if np.allclose(arr, arr[0], atol=1e-12):
        raise ValueError("degenerate trajectory: all cameras coincident")

    pitches = [0.0, np.deg2rad(spec.pitch_deg), -np.deg2rad(spec.pitch_deg)]
    cams = []
    for i, pos in enumerate(positions):
        to_center = -pos
        nrm = np.linalg.norm(to_center)
        forward = to_center / nrm if nrm > 1e-9 else np.array([1.0, 0.0, 0.0])
        pitch = pitches[i % 3]
        if abs(pitch) > 0:
            right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
            right /= np.linalg.norm(right)
            axis_up = np.cross(right, forward)
            forward = forward * np.cos(pitch) + axis_up * np.sin(pitch)
        R_wc = _look_rotation(forward)
        t_wc = -R_wc @ pos
        cams.append(Camera(K=K, R_wc=R_wc, t_wc=t_wc, width=w, height=h))
    return cams


def _jitter_normals(normals: np.ndarray, jitter_deg: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Rotate each unit normal by an angle ~ N(0, jitter) about a random
    perpendicular axis."""
    shape = normals.shape[:-1]
    n = normals.reshape(-1, 3)
    v = rng.normal(size=n.shape)
    t = v - n * np.sum(v * n, axis=1, keepdims=True)
    t_norm = np.linalg.norm(t, axis=1, keepdims=True)
    t = np.where(t_norm > 1e-9, t / np.where(t_norm > 0, t_norm, 1.0), 0.0)
    ang = rng.normal(0.0, np.deg2rad(jitter_deg), size=(n.shape[0], 1))
    out = n * np.cos(ang) + t * np.sin(ang)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(*shape, 3)


def _sample_wall_points(spec: SyntheticRoomSpec, rng: np.random.Generator) -> list[SfmPoint]:
    ext = np.asarray(spec.extents)
    half = ext / 2.0
    areas = []
    for axis, _ in _FACES:
        others = [a for a in range(3) if a != axis]
        areas.append(ext[others[0]] * ext[others[1]])
    areas = np.asarray(areas, dtype=np.float64)
    probs = areas / areas.sum()
    faces = rng.choice(6, size=spec.n_points, p=probs)
    points = []
    for i in range(spec.n_points):
        fi = int(faces[i])
        axis, sign = _FACES[fi]
        others = [a for a in range(3) if a != axis]
        pos = np.zeros(3)
        pos[axis] = sign * half[axis]
        pos[others[0]] = rng.uniform(-half[others[0]], half[others[0]])
        pos[others[1]] = rng.uniform(-half[others[1]], half[others[1]])
        uv = pos[[others[0], others[1]]]
        color = _texture_color(spec, fi, uv[None, :])[0]
        if spec.point_sigma > 0:
            pos = pos + rng.normal(0.0, spec.point_sigma, 3)
        points.append(SfmPoint(position=pos, match_count=int(rng.integers(1, 11)),
                               color=color))
    return points


def generate_synthetic_room(spec: SyntheticRoomSpec, out_dir=None):
    """Build the synthetic dataset (and GT mesh); optionally write it to disk.

    Returns (dataset, gt_vertices, gt_faces).  With ``out_dir`` the full
    on-disk layout (manifest, PNGs, PFM priors, point cloud, GT mesh) is
    written and the in-memory copies carry the exact quantized values of
    the files, so save-then-load round-trips bit-exactly.
    """
    rng = np.random.default_rng(spec.seed)
    cams = ring_cameras(spec)
    a_aff, b_aff = spec.depth_prior_affine

    frames = []
    cameras = {}
    manifest_frames = []
    writing = out_dir is not None
    if writing:
        out_dir = Path(out_dir)
        for sub in ("images", "depth", "normal"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)

    for i, cam in enumerate(cams):
        fid = f"f{i:03d}"
        cameras[f"cam{i:03d}"] = cam
        rgb, depth, normal = render_box_view(spec, cam)
        depth_prior = depth.copy()
        normal_prior = normal.copy()
        if spec.depth_sigma > 0:
            depth_prior = depth_prior * (1.0 + rng.normal(0.0, spec.depth_sigma,
                                                          depth_prior.shape))
        if spec.normal_jitter_deg > 0:
            normal_prior = _jitter_normals(normal_prior, spec.normal_jitter_deg, rng)
        stored_depth = a_aff * depth_prior + b_aff

        # quantize to the file precision so memory equals disk
        rgb_q = np.round(np.clip(rgb, 0, 1) * 255.0) / 255.0
        depth_q = stored_depth.astype(np.float32).astype(np.float64)
        normal_q = normal_prior.astype(np.float32).astype(np.float64)

        bundle = FrameBundle(
            frame_id=fid, camera=cam, image=rgb_q,
            depth_prior=depth_q, depth_valid=np.isfinite(depth_q) & (depth_q > 0),
            normal_prior=normal_q,
            normal_valid=np.linalg.norm(normal_q, axis=-1) > 1e-6,
        )
        frames.append(bundle)
        if writing:
            formats.write_png(out_dir / "images" / f"{fid}.png", rgb_q)
            formats.write_pfm(out_dir / "depth" / f"{fid}.pfm", stored_depth)
            formats.write_pfm(out_dir / "normal" / f"{fid}.pfm", normal_prior)
            with open(out_dir / "normal" / f"{fid}.pfm.json", "w", encoding="utf-8") as f:
                f.write('{"frame": "camera"}\n')
            manifest_frames.append({
                "id": fid, "camera": f"cam{i:03d}",
                "image": f"images/{fid}.png",
                "depth": f"depth/{fid}.pfm", "depth_scale": 1.0,
                "normal": f"normal/{fid}.pfm",
            })

    points = _sample_wall_points(spec, rng)
    verts, tris = box_mesh(spec.extents)

    if writing:
        formats.write_ply_points(
            out_dir / "points.ply",
            np.stack([p.position for p in points]),
            colors=np.stack([p.color for p in points]),
            match_counts=np.array([p.match_count for p in points]),
        )
        formats.write_ply_mesh(out_dir / "gt_mesh.ply", verts, tris)
        save_manifest(out_dir / "manifest.json", cameras, manifest_frames, "points.ply")

    ds = Dataset(frames=frames, points=points,
                 manifest_path=str(out_dir / "manifest.json") if writing else None,
                 cameras=cameras)
    return ds, verts, tris
