"""Parametric head meshes: blendshape synthesis, landmarks, assets.

The template carries linear shape/expression bases over a base mesh, a
68-entry barycentric landmark embedding, and a class-ID texture in UV
space. A procedural subdivided-icosphere head stands in for licensed
external assets; real assets load from OBJ + PGM + JSON files.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import io_formats
from .geometry import TriangleIndex
from .volume import DensityField

LANDMARK_COUNT = 68
PARAM_RANGE = 2.0


@dataclass(frozen=True)
class HeadParams:
    beta: np.ndarray   # shape coefficients
    psi: np.ndarray    # expression coefficients
    theta: np.ndarray  # pose; first 3 entries = global axis-angle rotation

    def __post_init__(self):
        for name in ("beta", "psi", "theta"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    def to_json_dict(self):
        return {"beta": self.beta.tolist(), "psi": self.psi.tolist(),
                "theta": self.theta.tolist()}

    @classmethod
    def from_json_dict(cls, d):
        return cls(beta=np.asarray(d["beta"]), psi=np.asarray(d["psi"]),
                   theta=np.asarray(d["theta"]))


@dataclass(frozen=True)
class TemplateAsset:
    base_vertices: np.ndarray       # (V, 3)
    shape_basis: np.ndarray         # (V, 3, n_beta)
    expr_basis: np.ndarray          # (V, 3, n_psi)
    faces: np.ndarray               # (F, 3)
    uv: np.ndarray                  # (3F, 2) per-face-corner
    landmark_faces: np.ndarray      # (L,)
    landmark_bary: np.ndarray       # (L, 3)
    class_texture: np.ndarray       # (Ht, Wt) uint8
    class_table: dict               # id -> name

    def __post_init__(self):
        V = len(self.base_vertices)
        if np.any(self.faces < 0) or np.any(self.faces >= V):
            raise ValueError("face index out of range")
        if np.any(self.landmark_faces < 0) or np.any(self.landmark_faces >= len(self.faces)):
            raise ValueError("landmark embedding references a missing face")
        bary = np.asarray(self.landmark_bary, dtype=np.float64)
        if np.any(bary < -1e-12) or np.any(np.abs(bary.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("landmark barycentrics must be nonnegative and sum to 1")
        tex_ids = set(np.unique(self.class_texture).tolist())
        declared = set(int(k) for k in self.class_table)
        if not tex_ids <= declared:
            raise ValueError(f"texture uses undeclared class IDs {sorted(tex_ids - declared)}")

    @property
    def n_beta(self):
        return self.shape_basis.shape[2]

    @property
    def n_psi(self):
        return self.expr_basis.shape[2]


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    landmark_faces: np.ndarray
    landmark_bary: np.ndarray
    class_texture: np.ndarray
    class_table: dict

    @classmethod
    def from_asset(cls, asset, vertices):
        return cls(vertices=vertices, faces=asset.faces, uv=asset.uv,
                   landmark_faces=asset.landmark_faces,
                   landmark_bary=asset.landmark_bary,
                   class_texture=asset.class_texture,
                   class_table=asset.class_table)

    def transformed(self, A, b):
        """Apply x -> A @ x + b to every vertex."""
        return replace(self, vertices=self.vertices @ np.asarray(A).T + np.asarray(b))


def sample_params(rng, n_beta=100, n_psi=100, n_theta=3):
    """Coefficients drawn Uniform(-2, 2), strictly inside the open interval."""
    vals = rng.random(n_beta + n_psi + n_theta) * (2 * PARAM_RANGE) - PARAM_RANGE
    vals = np.where(vals <= -PARAM_RANGE, np.nextafter(-PARAM_RANGE, 0.0), vals)
    return HeadParams(beta=vals[:n_beta], psi=vals[n_beta:n_beta + n_psi],
                      theta=vals[n_beta + n_psi:])


def synthesize_mesh(asset, params):
    """v = R(theta[:3]) @ (base + B_beta.beta + B_psi.psi) per vertex."""
    if len(params.beta) != asset.n_beta:
        raise ValueError(f"beta length {len(params.beta)} != basis {asset.n_beta}")
    if len(params.psi) != asset.n_psi:
        raise ValueError(f"psi length {len(params.psi)} != basis {asset.n_psi}")
    v = asset.base_vertices.copy()
    if asset.n_beta:
        v = v + asset.shape_basis @ params.beta
    if asset.n_psi:
        v = v + asset.expr_basis @ params.psi
    if len(params.theta) >= 3 and np.any(params.theta[:3] != 0.0):
        R = Rotation.from_rotvec(params.theta[:3]).as_matrix()
        v = v @ R.T
    return Mesh.from_asset(asset, v)


def landmarks3d(mesh):
    """Barycentric combination of each landmark's posed triangle."""
    tri = mesh.vertices[mesh.faces[mesh.landmark_faces]]  # (L, 3, 3)
    return np.einsum("lk,lkj->lj", mesh.landmark_bary, tri)


# ---------------------------------------------------------------------------
# Built-in procedural head


def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)
    return verts, faces


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = (np.array(verts[i]) + np.array(verts[j])) / 2.0
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(tuple(m))
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts, dtype=np.float64), np.array(out, dtype=np.int64)


_HEAD_SEMI_AXES = np.array([0.08, 0.10, 0.09])  # x across, y up, z back
_NOSE_DIR = np.array([0.0, -0.15, -1.0]) / np.linalg.norm([0.0, -0.15, -1.0])


def _head_surface(unit_dirs):
    """Map unit directions to head surface points (ellipsoid + nose bump)."""
    cosang = np.clip(unit_dirs @ _NOSE_DIR, -1.0, 1.0)
    ang = np.arccos(cosang)
    bump = 1.0 + 0.22 * np.exp(-(ang / 0.22) ** 2)
    return unit_dirs * _HEAD_SEMI_AXES * bump[:, None]


def _sphere_uv(unit_dirs):
    """Front of the head maps to u = 0.5; seam hidden at the back."""
    u = 0.5 + np.arctan2(unit_dirs[:, 0], -unit_dirs[:, 2]) / (2 * np.pi)
    v = 0.5 + np.arcsin(np.clip(unit_dirs[:, 1], -1, 1)) / np.pi
    return np.stack([u, v], axis=1)


BUILTIN_CLASS_TABLE = {
    0: "background", 1: "skin", 2: "nose", 3: "left-eye", 4: "right-eye",
    5: "upper-lip", 6: "lower-lip", 7: "left-brow", 8: "right-brow",
}


def _paint_class_texture(size=256):
    tex = np.full((size, size), 1, dtype=np.uint8)
    ty, tx = np.mgrid[0:size, 0:size]
    u = (tx + 0.5) / size
    v = (ty + 0.5) / size

    def ellipse(cu, cv, ru, rv):
        return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0

    tex[ellipse(0.5, 0.475, 0.035, 0.065)] = 2       # nose
    tex[ellipse(0.56, 0.565, 0.022, 0.013)] = 3      # left eye  (subject left, u > 0.5)
    tex[ellipse(0.44, 0.565, 0.022, 0.013)] = 4      # right eye
    tex[ellipse(0.5, 0.402, 0.048, 0.011)] = 5       # upper lip
    tex[ellipse(0.5, 0.378, 0.048, 0.013)] = 6       # lower lip
    tex[ellipse(0.56, 0.607, 0.028, 0.009)] = 7      # left brow
    tex[ellipse(0.44, 0.607, 0.028, 0.009)] = 8      # right brow
    return tex


def _canonical_landmark_layout():
    """68 sites as (x, y) in a normalized face frame, iBUG-like ordering."""
    pts = []
    xs = np.linspace(-1.0, 1.0, 17)
    pts += [(x, -0.35 - 0.55 * np.cos(x * np.pi / 2)) for x in xs]      # jaw
    pts += [(x, 0.45) for x in np.linspace(-0.70, -0.20, 5)]            # brows
    pts += [(x, 0.45) for x in np.linspace(0.20, 0.70, 5)]
    pts += [(0.0, y) for y in np.linspace(0.35, 0.02, 4)]               # nose bridge
    pts += [(x, -0.12) for x in np.linspace(-0.15, 0.15, 5)]            # nostrils
    for cx in (-0.42, 0.42):                                            # eyes
        for k in range(6):
            a = np.pi / 6 + k * np.pi / 3
            pts.append((cx + 0.12 * np.cos(a), 0.25 + 0.05 * np.sin(a)))
    for k in range(12):                                                 # mouth outer
        a = k * np.pi / 6
        pts.append((0.28 * np.cos(a), -0.42 + 0.12 * np.sin(a)))
    for k in range(8):                                                  # mouth inner
        a = k * np.pi / 4
        pts.append((0.17 * np.cos(a), -0.42 + 0.05 * np.sin(a)))
    return np.asarray(pts)


def _ray_surface_embedding(faces, verts):
    """Attach each canonical site to the triangle its origin-ray pierces."""
    layout = _canonical_landmark_layout()
    az = layout[:, 0] * 0.55
    el = layout[:, 1] * 0.50
    dirs = np.stack([np.sin(az) * np.cos(el), np.sin(el),
                     -np.cos(az) * np.cos(el)], axis=1)
    tri = verts[faces]  # (F,3,3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = b - a, c - a
    lm_faces = np.empty(len(dirs), dtype=np.int64)
    lm_bary = np.empty((len(dirs), 3))
    for i, d in enumerate(dirs):
        p = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = np.einsum("ij,ij->i", e1, p)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(det) > 1e-15, 1.0 / det, 0.0)
            s = -a
            uu = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1)
            vv = np.einsum("j,ij->i", d, q) * inv
            tt = np.einsum("ij,ij->i", e2, q) * inv
        hit = (np.abs(det) > 1e-15) & (uu >= -1e-12) & (vv >= -1e-12) \
            & (uu + vv <= 1 + 1e-12) & (tt > 0)
        if not hit.any():
            raise RuntimeError("landmark ray missed the head surface")
        fi = np.nonzero(hit)[0][np.argmax(tt[hit])]
        lm_faces[i] = fi
        w1 = float(np.clip(uu[fi], 0, 1))
        w2 = float(np.clip(vv[fi], 0, 1))
        w0 = max(0.0, 1.0 - w1 - w2)
        tot = w0 + w1 + w2
        lm_bary[i] = (w0 / tot, w1 / tot, w2 / tot)
    return lm_faces, lm_bary


def _smooth_basis(rng, unit_dirs, surface, n_modes, amplitude):
    """Seeded smooth offsets along the surface direction, one per mode."""
    V = len(surface)
    basis = np.zeros((V, 3, n_modes))
    # normalize by sqrt(n_modes) so the expected total deformation under
    # coefficients of unit scale stays mode-count independent
    amplitude = amplitude / np.sqrt(max(n_modes, 1))
    for j in range(n_modes):
        waves = np.zeros(V)
        for _ in range(3):
            freq = rng.uniform(2.0, 10.0, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            waves += amp * np.sin(surface @ (freq / _HEAD_SEMI_AXES.mean()) + phase)
        basis[:, :, j] = amplitude * waves[:, None] * unit_dirs
    return basis


def builtin_head(n_beta=100, n_psi=100, subdivision=3, texture_size=256):
    """Deterministic procedural head asset standing in for external assets."""
    if subdivision < 0:
        raise ValueError("subdivision must be >= 0")
    verts, faces = _icosahedron()
    for _ in range(subdivision):
        verts, faces = _subdivide(verts, faces)
    surface = _head_surface(verts)
    uv = _sphere_uv(verts)[faces].reshape(-1, 3, 2)
    # unwrap faces that straddle the u seam at the back of the head
    spread = uv[:, :, 0].max(axis=1) - uv[:, :, 0].min(axis=1)
    wrap = spread > 0.5
    uw = uv[wrap][:, :, 0]
    uw[uw < 0.5] += 1.0
    uv[wrap, :, 0] = np.minimum(uw, 1.0)
    uv = uv.reshape(-1, 2)

    rng = np.random.default_rng([90210, n_beta, n_psi, subdivision])
    shape_basis = _smooth_basis(rng, verts, surface, n_beta, 0.004)
    expr_basis = _smooth_basis(rng, verts, surface, n_psi, 0.003)
    lm_faces, lm_bary = _ray_surface_embedding(faces, surface)
    return TemplateAsset(
        base_vertices=surface, shape_basis=shape_basis, expr_basis=expr_basis,
        faces=faces, uv=uv, landmark_faces=lm_faces, landmark_bary=lm_bary,
        class_texture=_paint_class_texture(texture_size),
        class_table=dict(BUILTIN_CLASS_TABLE))


# ---------------------------------------------------------------------------
# External assets


def load_asset(mesh_path, uv_texture_path, embedding_path, class_table_path=None):
    """Load OBJ geometry + PGM class texture + JSON landmark embedding."""
    vertices, faces, uv = io_formats.read_obj(mesh_path)
    if uv is None:
        raise io_formats.FormatError(f"{mesh_path}: mesh has no UV coordinates")
    tex = io_formats.read_pgm(uv_texture_path)
    entries = io_formats.load_json(embedding_path)
    if not isinstance(entries, list) or not entries:
        raise ValueError(f"{embedding_path}: embedding must be a nonempty list")
    lm_faces = np.array([e["face"] for e in entries], dtype=np.int64)
    lm_bary = np.array([e["bary"] for e in entries], dtype=np.float64)
    if class_table_path is not None:
        table = {int(k): v for k, v in io_formats.load_json(class_table_path).items()}
    else:
        table = {int(i): f"class-{int(i)}" for i in np.unique(tex)}
        table.setdefault(0, "background")
    V = len(vertices)
    return TemplateAsset(
        base_vertices=vertices,
        shape_basis=np.zeros((V, 3, 0)), expr_basis=np.zeros((V, 3, 0)),
        faces=faces, uv=uv, landmark_faces=lm_faces, landmark_bary=lm_bary,
        class_texture=tex, class_table=table)


def save_asset(asset, mesh_path, uv_texture_path, embedding_path,
               class_table_path=None):
    io_formats.write_obj(mesh_path, asset.base_vertices, asset.faces, uv=asset.uv)
    io_formats.write_pgm(uv_texture_path, asset.class_texture)
    entries = [{"face": int(f), "bary": [float(x) for x in b]}
               for f, b in zip(asset.landmark_faces, asset.landmark_bary)]
    io_formats.dump_json(embedding_path, entries)
    if class_table_path is not None:
        io_formats.dump_json(class_table_path,
                             {str(k): v for k, v in asset.class_table.items()})


# ---------------------------------------------------------------------------
# Generator stand-in density


class MeshShellDensity(DensityField):
    """Density ramping linearly from sigma0 at the surface to 0 at shell_width."""

    def __init__(self, mesh, shell_width=0.01, sigma0=1500.0, radiance_fn=None):
        if shell_width <= 0 or sigma0 <= 0:
            raise ValueError("shell_width and sigma0 must be positive")
        self.mesh = mesh
        self.shell_width = float(shell_width)
        self.sigma0 = float(sigma0)
        self.index = TriangleIndex(mesh.vertices, mesh.faces)
        self.degenerate_count = self.index.degenerate_count
        self._radiance_fn = radiance_fn

    def sigma(self, points):
        d = self.index.distance(np.atleast_2d(points), cutoff=self.shell_width)
        ramp = 1.0 - d / self.shell_width
        return self.sigma0 * np.where(d < self.shell_width, ramp, 0.0)

    @property
    def bbox(self):
        lo = self.mesh.vertices.min(axis=0) - self.shell_width
        hi = self.mesh.vertices.max(axis=0) + self.shell_width
        return (lo, hi)

    @property
    def has_radiance(self):
        return self._radiance_fn is not None

    def radiance(self, points, directions):
        if self._radiance_fn is None:
            return super().radiance(points, directions)
        return np.asarray(self._radiance_fn(np.atleast_2d(points),
                                            np.atleast_2d(directions)))


def mesh_to_density(mesh, shell_width=0.01, sigma0=1500.0, radiance_fn=None):
    """Surface-shell density field standing in for the neural generator."""
    return MeshShellDensity(mesh, shell_width=shell_width, sigma0=sigma0,
                            radiance_fn=radiance_fn)
