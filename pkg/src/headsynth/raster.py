"""Software rasterizer: per-pixel class IDs, camera-space depth, landmarks.

Triangles are projected with the rig's normalized intrinsics, scan-converted
with edge functions and a top-left fill rule, and depth-tested with a
z-buffer. UV attributes are interpolated perspective-correctly; the class
texture is sampled nearest-texel so labels stay categorical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DepthMap:
    """Camera-space z per pixel; `valid` False marks background."""

    values: np.ndarray  # (H, W) float
    valid: np.ndarray   # (H, W) bool

    @property
    def resolution(self):
        h, w = self.values.shape
        return (w, h)

    def values_with_sentinel(self):
        out = np.array(self.values, dtype=np.float32)
        out[~self.valid] = np.inf
        return out

    @classmethod
    def from_sentinel(cls, values):
        valid = np.isfinite(values)
        vals = np.array(values, dtype=np.float64)
        vals[~valid] = 0.0
        return cls(values=vals, valid=valid)


@dataclass
class ClassMap:
    values: np.ndarray  # (H, W) uint8, 0 = background

    @property
    def resolution(self):
        h, w = self.values.shape
        return (w, h)


@dataclass
class FragmentBuffer:
    """Per-pixel face index (-1 = none) and perspective-correct barycentrics."""

    face_index: np.ndarray  # (H, W) int32
    bary: np.ndarray        # (H, W, 3) float


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(mesh, rig, near_eps=1e-6):
    """Render (DepthMap, ClassMap, FragmentBuffer) for a mesh and camera."""
    w, h = rig.resolution
    intr, extr = rig.intrinsics, rig.extrinsics
    depth = np.full((h, w), np.inf)
    face_idx = np.full((h, w), -1, dtype=np.int32)
    bary_buf = np.zeros((h, w, 3))

    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if len(verts) and len(faces):
        cam = verts @ extr.R.T + extr.t
        z = cam[:, 2]
        # screen coordinates in pixels; pixel centers at integer+0.5
        safe_z = np.where(np.abs(z) > near_eps, z, np.inf)
        px = (intr.cx + intr.fx * cam[:, 0] / safe_z) * w
        py = (intr.cy + intr.fy * cam[:, 1] / safe_z) * h

        tz = z[faces]
        front = np.all(tz > near_eps, axis=1)  # no near-plane clipping
        tx = px[faces]
        ty = py[faces]

        for fi in np.nonzero(front)[0]:
            x0, x1, x2 = tx[fi]
            y0, y1, y2 = ty[fi]
            area = _edge(x0, y0, x1, y1, x2, y2)
            if area == 0.0:
                continue
            xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
            xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), w - 1)
            ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
            ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), h - 1)
            if xmin > xmax or ymin > ymax:
                continue
            cols = np.arange(xmin, xmax + 1) + 0.5
            rows = np.arange(ymin, ymax + 1) + 0.5
            pxs, pys = np.meshgrid(cols, rows)
            w0 = _edge(x1, y1, x2, y2, pxs, pys)
            w1 = _edge(x2, y2, x0, y0, pxs, pys)
            w2 = _edge(x0, y0, x1, y1, pxs, pys)
            if area < 0.0:
                w0, w1, w2, a = -w0, -w1, -w2, -area
            else:
                a = area
            inside = np.ones(w0.shape, dtype=bool)
            for wi, (ax, ay, bx, by) in zip(
                    (w0, w1, w2),
                    ((x1, y1, x2, y2), (x2, y2, x0, y0), (x0, y0, x1, y1))):
                dx, dy = bx - ax, by - ay
                if area < 0.0:
                    dx, dy = -dx, -dy
                top_left = (dy < 0.0) or (dy == 0.0 and dx < 0.0)
                inside &= (wi > 0.0) | ((wi == 0.0) & top_left)
            if not inside.any():
                continue
            b0 = w0 / a
            b1 = w1 / a
            b2 = w2 / a
            z0, z1, z2 = tz[fi]
            inv_z = b0 / z0 + b1 / z1 + b2 / z2
            frag_z = 1.0 / inv_z
            tile = depth[ymin:ymax + 1, xmin:xmax + 1]
            win = inside & (frag_z < tile)
            if not win.any():
                continue
            tile[win] = frag_z[win]
            face_idx[ymin:ymax + 1, xmin:xmax + 1][win] = fi
            # perspective-correct barycentrics for attribute interpolation
            pb = np.stack([b0 / z0, b1 / z1, b2 / z2], axis=-1) * frag_z[..., None]
            bary_buf[ymin:ymax + 1, xmin:xmax + 1][win] = pb[win]

    covered = face_idx >= 0
    depth_map = DepthMap(values=np.where(covered, depth, 0.0), valid=covered)

    class_vals = np.zeros((h, w), dtype=np.uint8)
    if covered.any() and getattr(mesh, "uv", None) is not None \
            and getattr(mesh, "class_texture", None) is not None:
        uv_faces = np.asarray(mesh.uv, dtype=np.float64).reshape(-1, 3, 2)
        tex = np.asarray(mesh.class_texture)
        th, tw = tex.shape
        fids = face_idx[covered]
        bc = bary_buf[covered]
        uv_pix = np.einsum("nk,nkj->nj", bc, uv_faces[fids])
        txi = np.clip((uv_pix[:, 0] * tw).astype(np.int64), 0, tw - 1)
        tyi = np.clip((uv_pix[:, 1] * th).astype(np.int64), 0, th - 1)
        class_vals[covered] = tex[tyi, txi]

    return depth_map, ClassMap(values=class_vals), \
        FragmentBuffer(face_index=face_idx, bary=bary_buf)


def project_landmarks(mesh, rig, depth_map, lm3d=None, depth_eps=1e-3):
    """Project 68 landmarks and flag visibility against the rendered depth.

    A landmark is visible when its camera depth is within `depth_eps` of the
    z-buffer value at its pixel (background pixels never occlude).
    """
    from .headmodel import landmarks3d

    if lm3d is None:
        lm3d = landmarks3d(mesh)
    w, h = rig.resolution
    cam = lm3d @ rig.extrinsics.R.T + rig.extrinsics.t
    z = cam[:, 2]
    intr = rig.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.cx + intr.fx * cam[:, 0] / z
        v = intr.cy + intr.fy * cam[:, 1] / z
    cols = np.clip((u * w).astype(np.int64), 0, w - 1)
    rows = np.clip((v * h).astype(np.int64), 0, h - 1)
    in_image = (u >= 0) & (u < 1) & (v >= 0) & (v < 1) & (z > 0)
    zbuf = np.where(depth_map.valid[rows, cols], depth_map.values[rows, cols], np.inf)
    visible = in_image & (z <= zbuf + depth_eps)
    return np.stack([u, v], axis=1), visible
