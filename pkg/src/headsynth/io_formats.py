"""Readers/writers for the on-disk formats: PFM, PGM, PNM, PLY, OBJ, DVOX.

All binary formats are little-endian. PFM follows the grayscale "Pf"
convention with a negative scale (little-endian) and bottom-up row order;
invalid pixels are stored as +Inf.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Raised when a file does not conform to its declared format."""


# ---------------------------------------------------------------------------
# PFM (depth maps)


def write_pfm(path, values, valid=None):
    """Write a float32 grayscale PFM. Invalid pixels become +Inf."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    data = values.copy()
    if valid is not None:
        data[~np.asarray(valid, dtype=bool)] = np.inf
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        # bottom-up row order
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    """Read a grayscale PFM. Returns (values, valid) with +Inf mapped to invalid."""
    raw = Path(path).read_bytes()
    try:
        tokens, pos = [], 0
        while len(tokens) < 4:
            while raw[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise FormatError(f"{path}: truncated PFM header")
            tokens.append(raw[start:pos])
        pos += 1  # single whitespace terminates the header
        if tokens[0] != b"Pf":
            raise FormatError(f"{path}: bad PFM magic {tokens[0]!r}")
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
        header_end = pos
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed PFM header") from exc
    n = w * h * 4
    body = raw[header_end:header_end + n]
    if len(body) < n:
        raise FormatError(
            f"{path}: truncated PFM body at byte {header_end + len(body)}, "
            f"expected {header_end + n} bytes total")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(body, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)
    valid = np.isfinite(data)
    return data.copy(), valid


# ---------------------------------------------------------------------------
# PGM / PNM


def write_pgm(path, values):
    """Write an 8-bit binary PGM (P5)."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("PGM writer expects a 2D array")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_netpbm_header(raw, path, magic_expected):
    if not raw.startswith(magic_expected):
        raise FormatError(f"{path}: bad magic, expected {magic_expected!r}")
    # tokens may be separated by any whitespace; comments start with '#'
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric header field") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    return w, h, pos


def read_pgm(path):
    raw = Path(path).read_bytes()
    w, h, pos = _read_netpbm_header(raw, path, b"P5")
    n = w * h
    body = raw[pos:pos + n]
    if len(body) < n:
        raise FormatError(f"{path}: truncated PGM body at byte {pos + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pnm(path, rgb):
    """Write an 8-bit binary PPM (P6) from an H x W x 3 uint8 array."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PNM writer expects an H x W x 3 array")
    arr = arr.astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pnm(path):
    raw = Path(path).read_bytes()
    w, h, pos = _read_netpbm_header(raw, path, b"P6")
    n = w * h * 3
    body = raw[pos:pos + n]
    if len(body) < n:
        raise FormatError(f"{path}: truncated PNM body at byte {pos + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# ASCII PLY point clouds


def write_ply_points(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = "\n".join(" ".join(repr(float(c)) for c in p) for p in pts)
    text = "\n".join(lines) + "\n" + (body + "\n" if len(pts) else "")
    Path(path).write_text(text)


def read_ply_points(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line.strip() == "end_header":
            start = i + 1
            break
    else:
        raise FormatError(f"{path}: missing end_header")
    if n is None:
        raise FormatError(f"{path}: missing vertex element")
    pts = []
    for line in lines[start:start + n]:
        x, y, z = (float(v) for v in line.split()[:3])
        pts.append((x, y, z))
    if len(pts) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(pts)}")
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# OBJ (v / vt / f with texture indices)


def write_obj(path, vertices, faces, uv=None, uv_faces=None):
    """Write geometry. `uv` is per-corner when uv_faces is None (3F x 2)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    out = []
    for p in v:
        out.append(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    if uv is not None:
        uvs = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        for t in uvs:
            out.append(f"vt {t[0]:.17g} {t[1]:.17g}")
        if uv_faces is None:
            uv_faces = np.arange(3 * len(f)).reshape(-1, 3)
        for tri, tuv in zip(f, np.asarray(uv_faces, dtype=np.int64)):
            out.append("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(tri, tuv)))
    else:
        for tri in f:
            out.append("f " + " ".join(str(a + 1) for a in tri))
    Path(path).write_text("\n".join(out) + "\n")


def read_obj(path):
    """Parse v/vt/f. Returns (vertices, faces, uv_per_corner or None)."""
    verts, uvs, faces, uv_faces = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise FormatError(f"{path}:{lineno}: only triangles supported")
                vi, ti = [], []
                for token in parts[1:]:
                    pieces = token.split("/")
                    vi.append(int(pieces[0]) - 1)
                    if len(pieces) > 1 and pieces[1]:
                        ti.append(int(pieces[1]) - 1)
                faces.append(vi)
                if ti:
                    uv_faces.append(ti)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed OBJ record") from exc
    vertices = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if np.any(faces_arr >= len(vertices)) or np.any(faces_arr < 0):
        raise FormatError(f"{path}: face references vertex out of range")
    uv = None
    if uv_faces:
        if len(uv_faces) != len(faces):
            raise FormatError(f"{path}: mixed textured/untextured faces")
        uvt = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        idx = np.asarray(uv_faces, dtype=np.int64)
        if np.any(idx >= len(uvt)) or np.any(idx < 0):
            raise FormatError(f"{path}: face references uv out of range")
        uv = uvt[idx].reshape(-1, 2)
    return vertices, faces_arr, uv


# ---------------------------------------------------------------------------
# DVOX voxel grids

_DVOX_MAGIC = b"DVOX"
_DVOX_VERSION = 1


def write_dvox(path, dims, bbox_min, bbox_max, values):
    nx, ny, nz = (int(d) for d in dims)
    vals = np.asarray(values, dtype="<f4")
    if vals.size != nx * ny * nz:
        raise ValueError("value count does not match dims")
    with open(path, "wb") as f:
        f.write(_DVOX_MAGIC)
        f.write(struct.pack("<H", _DVOX_VERSION))
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<6f", *np.asarray(bbox_min, dtype=np.float64),
                            *np.asarray(bbox_max, dtype=np.float64)))
        # x-fastest ordering
        f.write(np.ascontiguousarray(vals.reshape(nz, ny, nx)).tobytes())


def read_dvox(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _DVOX_MAGIC:
        raise FormatError(f"{path}: bad DVOX magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _DVOX_VERSION:
        raise FormatError(f"{path}: unsupported DVOX version {version}")
    nx, ny, nz = struct.unpack_from("<3I", raw, 6)
    bbox = struct.unpack_from("<6f", raw, 18)
    n = nx * ny * nz * 4
    body = raw[42:42 + n]
    if len(body) < n:
        raise FormatError(f"{path}: truncated DVOX body at byte {42 + len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(nz, ny, nx).copy()
    return (nx, ny, nz), np.asarray(bbox[:3]), np.asarray(bbox[3:]), values


# ---------------------------------------------------------------------------
# JSON helpers and digests


def dump_json(path, obj):
    Path(path).write_text(canonical_json(obj) + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from exc


def canonical_json(obj):
    """Deterministic JSON with 17 significant digits for floats."""
    return json.dumps(_round_trip_floats(obj), sort_keys=True, separators=(",", ":"))


def _round_trip_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.17g}")
    if isinstance(obj, dict):
        return {k: _round_trip_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_trip_floats(v) for v in obj]
    if isinstance(obj, np.floating):
        return _round_trip_floats(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round_trip_floats(obj.tolist())
    return obj


def file_digest(path):
    """Hex SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
