"""Rasterizer against an independent ray-casting oracle, fill rules,
perspective-correct interpolation, and landmark projection."""

import numpy as np
import pytest

from headsynth import camera as cam
from headsynth.headmodel import HeadParams, Mesh, builtin_head, landmarks3d, \
    synthesize_mesh
from headsynth.raster import DepthMap, project_landmarks, rasterize


def frontal_rig(fov=20.0, res=(48, 48)):
    return cam.CameraRig(intrinsics=cam.build_intrinsics(fov),
                         extrinsics=cam.look_at_extrinsics(
                             0.0, 0.0, cam.CAMERA_DISTANCE_M),
                         resolution=res)


def bare_mesh(vertices, faces, uv=None, texture=None):
    n = len(np.asarray(faces))
    return Mesh(vertices=np.asarray(vertices, dtype=np.float64),
                faces=np.asarray(faces, dtype=np.int64),
                uv=np.zeros((3 * n, 2)) if uv is None else np.asarray(uv),
                landmark_faces=np.empty(0, dtype=np.int64),
                landmark_bary=np.empty((0, 3)),
                class_texture=(np.zeros((1, 1), dtype=np.uint8)
                               if texture is None else texture),
                class_table={})


def raycast_depth(mesh, rig):
    """Möller–Trumbore first-hit oracle, no acceleration structure."""
    rays = cam.generate_rays(rig)
    o = rays.origins.reshape(-1, 3)
    d = rays.directions.reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]  # (F, 3, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    best = np.full(len(o), np.inf)
    for f in range(len(tri)):
        pvec = np.cross(d, e2[f])
        det = pvec @ e1[f]
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o - tri[f, 0]
        u = np.einsum("ij,ij->i", pvec, s) * inv
        qvec = np.cross(s, e1[f])
        v = np.einsum("ij,ij->i", qvec, d) * inv
        t = (qvec @ e2[f]) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        best = np.where(hit & (t < best), t, best)
    w, h = rig.resolution
    # convert ray length to camera z
    dz = (d @ rig.extrinsics.R[2])
    z = np.where(np.isfinite(best), best * dz, np.inf)
    return z.reshape(h, w)


def test_depth_matches_raycast_oracle_on_builtin_head():
    asset = builtin_head(4, 4, subdivision=2)
    mesh = synthesize_mesh(asset, HeadParams(np.zeros(4), np.zeros(4),
                                             np.zeros(3)))
    rig = frontal_rig(fov=12.0, res=(96, 96))
    depth, _, _ = rasterize(mesh, rig)
    oracle = raycast_depth(mesh, rig)
    both = depth.valid & np.isfinite(oracle)
    assert both.sum() > 500
    diff = np.abs(depth.values[both] - oracle[both])
    assert np.quantile(diff, 0.99) < 1e-4
    # coverage agrees except at silhouette pixels
    disagree = depth.valid ^ np.isfinite(oracle)
    assert disagree.mean() < 0.02


def test_shared_edge_covered_exactly_once():
    # a quad split along the diagonal; every covered pixel belongs to
    # exactly one triangle, with no cracks
    quad = np.array([[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0],
                     [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]])
    mesh = bare_mesh(quad, [[0, 1, 2], [0, 2, 3]])
    rig = frontal_rig(res=(33, 33))
    depth, _, frags = rasterize(mesh, rig)
    # interior of the projected quad is fully covered (no diagonal crack)
    ys, xs = np.nonzero(depth.valid)
    assert depth.valid[ys.min() + 1:ys.max(), xs.min() + 1:xs.max()].all()
    assert set(np.unique(frags.face_index)) <= {-1, 0, 1}


def test_perspective_correct_depth_interpolation():
    # a triangle slanted in depth: rasterized z must follow 1/z interpolation
    tri = np.array([[-0.6, -0.6, -0.5], [0.6, -0.6, -0.5], [0.0, 0.9, 0.5]])
    mesh = bare_mesh(tri, [[0, 1, 2]])
    rig = frontal_rig(res=(64, 64))
    depth, _, frags = rasterize(mesh, rig)
    oracle = raycast_depth(mesh, rig)
    both = depth.valid & np.isfinite(oracle)
    assert both.sum() > 500
    assert np.abs(depth.values[both] - oracle[both]).max() < 1e-9


def test_class_lookup_is_nearest_texel():
    quad = np.array([[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0],
                     [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]])
    # 2x2 categorical texture; bilinear filtering would blend these IDs
    tex = np.array([[1, 2], [3, 4]], dtype=np.uint8)
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0],
                   [0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    mesh = bare_mesh(quad, [[0, 1, 2], [0, 2, 3]], uv=uv, texture=tex)
    rig = frontal_rig(res=(40, 40))
    _, classes, _ = rasterize(mesh, rig)
    present = set(np.unique(classes.values)) - {0}
    assert present == {1, 2, 3, 4}


def test_landmarks_project_and_occlude():
    asset = builtin_head(4, 4, subdivision=2)
    mesh = synthesize_mesh(asset, HeadParams(np.zeros(4), np.zeros(4),
                                             np.zeros(3)))
    rig = frontal_rig(res=(64, 64))
    depth, _, _ = rasterize(mesh, rig)
    uv, visible = project_landmarks(mesh, rig, depth)
    assert uv.shape == (68, 2)
    assert visible.dtype == bool
    assert 20 <= visible.sum() < 68  # front visible, far side occluded
    lm3d = landmarks3d(mesh)
    # visible landmarks reproject within a pixel of their depth sample
    w, h = rig.resolution
    for i in np.nonzero(visible)[0][:10]:
        col = int(uv[i, 0] * w)
        row = int(uv[i, 1] * h)
        assert depth.valid[row, col]


def test_empty_mesh_renders_background():
    mesh = bare_mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    depth, classes, frags = rasterize(mesh, frontal_rig(res=(8, 8)))
    assert not depth.valid.any()
    assert (classes.values == 0).all()
    assert (frags.face_index == -1).all()


def test_depth_sentinel_roundtrip():
    vals = np.array([[1.0, 2.0], [3.0, 4.0]])
    valid = np.array([[True, False], [False, True]])
    dm = DepthMap(values=vals, valid=valid)
    sent = dm.values_with_sentinel()
    assert np.isinf(sent[0, 1]) and np.isinf(sent[1, 0])
    back = DepthMap.from_sentinel(sent)
    assert np.array_equal(back.valid, valid)
    assert np.allclose(back.values[valid], vals[valid])
