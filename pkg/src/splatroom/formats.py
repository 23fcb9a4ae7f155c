"""File formats: PLY point clouds and meshes, PFM float maps, PNG images,
and the line-oriented ``key = value`` config text.

All binary formats are little-endian; every writer/reader pair round-trips
bit-exactly.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "read_ply",
    "write_ply_points",
    "write_ply_mesh",
    "read_pfm",
    "write_pfm",
    "read_png",
    "write_png",
    "read_depth_png16",
    "write_depth_png16",
    "parse_config_text",
    "format_config_text",
]

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def read_ply(path) -> dict:
    """Parse an ascii or binary little-endian PLY file.

    Returns {"vertex": {prop: array, ...}, "face": (n, 3) int array or None}.
    """
    path = Path(path)
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop, dtype) or ("__list__", prop, cdtype, idtype)])
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of header")
            tokens = line.decode("ascii").strip().split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(("__list__", tokens[4], tokens[2], tokens[3]))
                else:
                    elements[-1][2].append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format '{fmt}'")

        out: dict = {"vertex": {}, "face": None}
        if fmt == "ascii":
            text = f.read().decode("ascii").split("\n")
            cursor = 0
            for name, count, props in elements:
                rows = [text[cursor + i].split() for i in range(count)]
                cursor += count
                _parse_ply_rows_ascii(out, name, props, rows)
        else:
            for name, count, props in elements:
                if any(p[0] == "__list__" for p in props):
                    _parse_ply_faces_binary(out, f, name, count, props)
                else:
                    dtype = np.dtype([(p[0], "<" + _PLY_DTYPES[p[1]]) for p in props])
                    data = np.frombuffer(f.read(dtype.itemsize * count), dtype=dtype)
                    if name == "vertex":
                        out["vertex"] = {p[0]: np.ascontiguousarray(data[p[0]]) for p in props}
        return out


def _parse_ply_rows_ascii(out, name, props, rows):
    if any(p[0] == "__list__" for p in props):
        faces = []
        for row in rows:
            n = int(row[0])
            faces.append([int(v) for v in row[1 : 1 + n]])
        if name == "face":
            out["face"] = np.asarray(faces, dtype=np.int64)
        return
    cols = {p[0]: [] for p in props}
    for row in rows:
        for (pname, ptype), val in zip(props, row):
            cols[pname].append(float(val) if _PLY_DTYPES[ptype][0] == "f" else int(val))
    if name == "vertex":
        out["vertex"] = {
            p[0]: np.asarray(cols[p[0]], dtype="<" + _PLY_DTYPES[p[1]]) for p in props
        }


def _parse_ply_faces_binary(out, f, name, count, props):
    spec = next(p for p in props if p[0] == "__list__")
    _, pname, cdtype, idtype = spec
    cdt = np.dtype("<" + _PLY_DTYPES[cdtype])
    idt = np.dtype("<" + _PLY_DTYPES[idtype])
    faces = []
    for _ in range(count):
        n = int(np.frombuffer(f.read(cdt.itemsize), dtype=cdt)[0])
        idx = np.frombuffer(f.read(idt.itemsize * n), dtype=idt)
        faces.append(idx.astype(np.int64))
    if name == "face":
        out["face"] = np.asarray(faces, dtype=np.int64)


def write_ply_points(path, positions, colors=None, match_counts=None,
                     binary: bool = True) -> None:
    """Write a point cloud; colors as uchar RGB, match_count as int32."""
    positions = np.asarray(positions, dtype="<f8")
    n = positions.shape[0]
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    cols = [positions[:, 0], positions[:, 1], positions[:, 2]]
    dtypes = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype("<u1")
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        cols += [rgb[:, 0], rgb[:, 1], rgb[:, 2]]
        dtypes += [("red", "<u1"), ("green", "<u1"), ("blue", "<u1")]
    if match_counts is not None:
        mc = np.asarray(match_counts, dtype="<i4")
        header.append("property int match_count")
        cols.append(mc)
        dtypes.append(("match_count", "<i4"))
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=dtypes)
            for (name, _), col in zip(dtypes, cols):
                rec[name] = col
            f.write(rec.tobytes())
        else:
            for i in range(n):
                f.write((" ".join(_fmt_ascii(c[i]) for c in cols) + "\n").encode("ascii"))


def _fmt_ascii(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    return str(int(v))


def write_ply_mesh(path, vertices, faces, colors=None) -> None:
    """Write a triangle mesh as binary little-endian PLY."""
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    n, m = vertices.shape[0], faces.shape[0]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    dtypes = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        dtypes += [("red", "<u1"), ("green", "<u1"), ("blue", "<u1")]
    header += [f"element face {m}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        rec = np.empty(n, dtype=dtypes)
        rec["x"], rec["y"], rec["z"] = vertices[:, 0], vertices[:, 1], vertices[:, 2]
        if colors is not None:
            rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype("<u1")
            rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
        f.write(rec.tobytes())
        frec = np.empty(m, dtype=[("n", "<u1"), ("a", "<i4"), ("b", "<i4"), ("c", "<i4")])
        frec["n"] = 3
        frec["a"], frec["b"], frec["c"] = faces[:, 0], faces[:, 1], faces[:, 2]
        f.write(frec.tobytes())


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    """Write a 1- or 3-channel float32 PFM, little-endian (scale -1.0).

    PFM stores scanlines bottom-to-top; the array is flipped on write and
    un-flipped on read so round-trips preserve the top-left-origin layout.
    """
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        magic = "Pf"
        h, w = data.shape
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = "PF"
        h, w = data.shape[:2]
    else:
        raise ValueError("PFM data must be (H, W) or (H, W, 3)")
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file written by :func:`write_pfm` (or any little-endian PFM)."""
    with open(path, "rb") as f:
        magic = f.readline().strip().decode("ascii")
        if magic not in ("PF", "Pf"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().decode("ascii")
        mo = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not mo:
            raise ValueError(f"{path}: malformed PFM dimensions")
        w, h = int(mo.group(1)), int(mo.group(2))
        scale = float(f.readline().decode("ascii").strip())
        endian = "<" if scale < 0 else ">"
        count = w * h * (3 if magic == "PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype=endian + "f4")
        shape = (h, w, 3) if magic == "PF" else (h, w)
        return np.flipud(data.reshape(shape)).astype(np.float32)


# -- PNG ---------------------------------------------------------------------

def write_png(path, image: np.ndarray) -> None:
    """Write an 8-bit RGB PNG from a float image in [0, 1]."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into a float array in [0, 1]."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_depth_png16(path, depth: np.ndarray, scale: float) -> None:
    """Write depth as 16-bit grayscale PNG; ``scale`` is meters per unit."""
    units = np.clip(np.round(np.asarray(depth) / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(units, mode="I;16").save(path)


def read_depth_png16(path, scale: float) -> np.ndarray:
    """Read a 16-bit grayscale PNG depth map back into meters."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return arr * scale


# -- key = value config text ---------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """Parse line-oriented ``key = value`` UTF-8 text; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_config_text(values: dict) -> str:
    return "\n".join(f"{k} = {v}" for k, v in values.items()) + "\n"
