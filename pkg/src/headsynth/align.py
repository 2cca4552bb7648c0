"""Affine mesh-to-volume alignment driven by depth and chamfer losses.

The 12-DOF transform is applied to mesh vertices before the camera
extrinsics (v_cam = [R|t] @ (A @ v + b)). Optimization runs in two phases:
an ICP loop with closed-form updates against surface points probed directly
from the density field, then a finite-difference descent on the exact
weighted depth + chamfer objective (the rasterizer is not differentiable).

The probe step exploits that the generator stand-in concentrates density in
a thin shell symmetric about the surface: along a ray from inside the head,
the midpoint of the above-threshold density run sits on the surface itself,
so the probed cloud covers the whole head without the projection bias a
camera-rendered level set carries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import volume as volume_mod
from .geometry import TriangleIndex, closest_point_on_triangles
from .headmodel import landmarks3d
from .raster import rasterize


@dataclass
class AffineParams:
    """v_out = A @ v + b."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64).reshape(3, 3)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("affine parameters must be finite")

    @classmethod
    def identity(cls):
        return cls(A=np.eye(3), b=np.zeros(3))

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(12)
        return cls(A=v[:9].reshape(3, 3), b=v[9:])

    def to_vector(self):
        return np.concatenate([self.A.ravel(), self.b])

    @property
    def matrix(self):
        return np.hstack([self.A, self.b[:, None]])

    def apply(self, points):
        return np.asarray(points) @ self.A.T + self.b


@dataclass
class AlignConfig:
    w_depth: float = 1.0
    w_chamfer: float = 0.2
    max_icp_iterations: int = 400
    max_refine_iterations: int = 3
    param_tol: float = 1e-6
    loss_tol: float = 1e-8
    resolution: int = 64
    level_set_alpha_frac: float = 0.5  # alpha = frac * peak density, if known
    level_set_alpha: float = None
    fd_step: float = 1e-4
    refine_step: float = 2e-3
    probe_directions: int = 1200
    probe_t_max: float = 0.4
    probe_coarse_step: float = 0.004
    icp_relaxation: float = 2.0  # over-relaxed updates to speed tangential sliding
    icp_tol: float = 1e-5

    def __post_init__(self):
        if self.w_depth < 0 or self.w_chamfer < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_depth == 0 and self.w_chamfer == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.resolution < 16:
            raise ValueError("optimization resolution must be at least 16")


@dataclass
class AlignmentReport:
    depth_loss: float
    chamfer_loss: float
    iterations: int
    converged: bool
    loss_trace: list
    affine: AffineParams
    icp_iterations: int = 0
    depth_term_degenerate: bool = False
    chamfer_term_degenerate: bool = False

    def to_json_dict(self):
        return {
            "depth_loss": float(self.depth_loss),
            "chamfer_loss": float(self.chamfer_loss),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "loss_trace": [float(x) for x in self.loss_trace],
            "T_a": [float(x) for x in self.affine.matrix.ravel()],
            "icp_iterations": int(self.icp_iterations),
            "depth_term_degenerate": bool(self.depth_term_degenerate),
            "chamfer_term_degenerate": bool(self.chamfer_term_degenerate),
        }

    @classmethod
    def from_json_dict(cls, d):
        M = np.asarray(d["T_a"], dtype=np.float64).reshape(3, 4)
        return cls(depth_loss=d["depth_loss"], chamfer_loss=d["chamfer_loss"],
                   iterations=d["iterations"], converged=d["converged"],
                   loss_trace=list(d["loss_trace"]),
                   affine=AffineParams(A=M[:, :3], b=M[:, 3]),
                   icp_iterations=d.get("icp_iterations", 0),
                   depth_term_degenerate=d.get("depth_term_degenerate", False),
                   chamfer_term_degenerate=d.get("chamfer_term_degenerate", False))


def chamfer(a, b):
    """Symmetric sum of squared nearest-neighbor distances."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a, workers=-1)
    d_ba, _ = cKDTree(a).query(b, workers=-1)
    return float(np.sum(d_ab ** 2) + np.sum(d_ba ** 2))


def chamfer_bruteforce(a, b):
    """Double-loop oracle for the spatial-index chamfer."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return float(np.sum(d2.min(axis=1)) + np.sum(d2.min(axis=0)))


def depth_loss(d_gen, d_mesh):
    """Sum of squared depth differences over jointly valid pixels.

    Returns (loss, valid_count); count 0 flags a degenerate overlap.
    """
    if d_gen.values.shape != d_mesh.values.shape:
        raise ValueError("depth maps must share a resolution")
    both = d_gen.valid & d_mesh.valid
    diff = d_gen.values[both] - d_mesh.values[both]
    return float(np.sum(diff ** 2)), int(both.sum())


def _opt_rig(rig, resolution):
    from dataclasses import replace
    return replace(rig, resolution=(resolution, resolution))


class AlignmentProblem:
    """Caches the field-side renders so repeated T_a evaluations stay cheap."""

    def __init__(self, mesh, fieldv, rig, cfg, march_cfg=None):
        self.mesh = mesh
        self.field = fieldv
        self.cfg = cfg
        self.rig = _opt_rig(rig, cfg.resolution)
        self.march_cfg = march_cfg or volume_mod.MarchConfig()
        self.d_gen = volume_mod.render_depth_map(fieldv, self.rig, self.march_cfg)
        alpha = cfg.level_set_alpha
        if alpha is None:
            peak = getattr(fieldv, "sigma0", None)
            alpha = cfg.level_set_alpha_frac * (peak if peak else 1.0)
        self.level_set_world = volume_mod.extract_level_set(
            fieldv, self.rig, self.march_cfg, alpha)
        R, t = self.rig.extrinsics.R, self.rig.extrinsics.t
        self.level_set_cam = self.level_set_world @ R.T + t
        self.landmarks = landmarks3d(mesh)

    def total_loss(self, affine, detail=False):
        cfg = self.cfg
        ld = lc = 0.0
        depth_degenerate = chamfer_degenerate = False
        if cfg.w_depth > 0:
            moved = self.mesh.transformed(affine.A, affine.b)
            d_mesh, _, _ = rasterize(moved, self.rig)
            ld, count = depth_loss(self.d_gen, d_mesh)
            if count == 0:
                ld, depth_degenerate = 0.0, True
        if cfg.w_chamfer > 0:
            R, t = self.rig.extrinsics.R, self.rig.extrinsics.t
            lm_cam = affine.apply(self.landmarks) @ R.T + t
            if len(self.level_set_cam) == 0:
                lc, chamfer_degenerate = 0.0, True
            else:
                lc = chamfer(lm_cam, self.level_set_cam)
        total = cfg.w_depth * ld + cfg.w_chamfer * lc
        if detail:
            return total, ld, lc, depth_degenerate, chamfer_degenerate
        return total


def total_loss(affine, mesh, fieldv, rig, cfg, march_cfg=None):
    """One-shot evaluation of the weighted depth + chamfer objective."""
    return AlignmentProblem(mesh, fieldv, rig, cfg, march_cfg).total_loss(affine)


def fit_affine_lsq(src, dst):
    """Least-squares [A|b] mapping src points onto dst points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise ValueError("affine fit needs at least 4 correspondences")
    X = np.hstack([src, np.ones((len(src), 1))])
    sol, *_ = np.linalg.lstsq(X, dst, rcond=None)
    A = sol[:3].T
    b = sol[3]
    return AffineParams(A=A, b=b)


def fit_similarity(src, dst):
    """Closed-form least-squares scale/rotation/translation (Umeyama)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    sgn = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        sgn[2, 2] = -1.0
    R = U @ sgn @ Vt
    var_s = np.mean(np.sum(xs ** 2, axis=1))
    scale = np.trace(np.diag(S) @ sgn) / var_s if var_s > 0 else 1.0
    A = scale * R
    b = mu_d - A @ mu_s
    return AffineParams(A=A, b=b)


def _fibonacci_directions(n):
    """n roughly-uniform unit vectors (spherical Fibonacci lattice)."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([np.cos(theta) * np.sin(phi),
                     np.sin(theta) * np.sin(phi),
                     np.cos(phi)], axis=1)


def probe_surface_points(fieldv, origin, n_directions=1200, t_max=0.4,
                         coarse_step=0.004, alpha=None, alpha_frac=0.5):
    """Sample surface points of a shell-like density field by ray probing.

    Rays leave `origin` in Fibonacci-lattice directions. A coarse march
    brackets the first densified stretch of each ray; a fine march inside
    the bracket finds the run where sigma >= alpha, and the run's midpoint
    is reported. For a density that falls off symmetrically on both sides
    of the surface this midpoint lies on the surface (exactly for a locally
    planar patch, to curvature order otherwise).

    Returns (points, alpha_used); points may be empty if nothing exceeds
    the threshold.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = _fibonacci_directions(n_directions)
    tc = np.arange(coarse_step / 2, t_max, coarse_step)
    pts = origin + dirs[:, None, :] * tc[None, :, None]
    sig = fieldv.sigma(pts.reshape(-1, 3)).reshape(n_directions, len(tc))
    peak = float(sig.max())
    if peak <= 0.0:
        return np.empty((0, 3)), 0.0
    if alpha is None:
        alpha = alpha_frac * peak
    hit = sig > 0.0
    ok = hit.any(axis=1)
    first = hit.argmax(axis=1)
    t0 = np.clip(tc[first[ok]] - coarse_step, 0.0, None)
    fine = coarse_step / 16.0
    tf = np.arange(0.0, 3.0 * coarse_step, fine)
    sub = origin + dirs[ok, None, :] * (t0[:, None] + tf[None, :])[:, :, None]
    sigf = fieldv.sigma(sub.reshape(-1, 3)).reshape(int(ok.sum()), len(tf))
    above = sigf >= alpha
    found = above.any(axis=1)
    i_in = above.argmax(axis=1)
    # first index past i_in where the run ends
    cols = np.arange(len(tf))
    masked = np.where(above | (cols[None, :] < i_in[:, None]), len(tf), cols[None, :])
    i_out = masked.min(axis=1)
    t_mid = t0 + 0.5 * (tf[i_in] + tf[np.clip(i_out - 1, 0, len(tf) - 1)]) + fine / 2
    points = (origin + dirs[ok] * t_mid[:, None])[found]
    return points, float(alpha)


def _closest_surface_points(index, queries, k=6):
    """Exact nearest surface point per query, searching k nearest triangles."""
    k = min(k, len(index.triangles))
    _, tis = index._tree.query(queries, k=k, workers=-1)
    tis = np.atleast_2d(tis.reshape(len(queries), -1))
    best_d = np.full(len(queries), np.inf)
    best_p = np.zeros((len(queries), 3))
    for col in range(tis.shape[1]):
        tri = index.triangles[tis[:, col]]
        cp = closest_point_on_triangles(queries, tri[:, 0], tri[:, 1], tri[:, 2])
        d = np.linalg.norm(queries - cp, axis=1)
        upd = d < best_d
        best_d[upd] = d[upd]
        best_p[upd] = cp[upd]
    return best_d, best_p


def _probe_origin(problem):
    """A point expected to lie inside the densified head: the centroid of the
    backprojected generator depth pushed along the viewing direction."""
    dg = problem.d_gen
    if not dg.valid.any():
        if len(problem.level_set_world):
            return problem.level_set_world.mean(axis=0)
        return None
    rig = problem.rig
    w, h = rig.resolution
    rr, cc = np.nonzero(dg.valid)
    z = dg.values[rr, cc]
    intr = rig.intrinsics
    u = (cc + 0.5) / w
    v = (rr + 0.5) / h
    cam = np.stack([(u - intr.cx) / intr.fx * z,
                    (v - intr.cy) / intr.fy * z, z], axis=1)
    R, t = rig.extrinsics.R, rig.extrinsics.t
    front = (cam - t) @ R
    return front.mean(axis=0) + R[2] * 0.07


def _surface_icp_phase(problem, affine):
    """Similarity ICP between probed field-surface points and the mesh.

    Targets are pulled back through the current transform and matched to
    their exact nearest point on the untransformed mesh surface, so the
    (static) triangle index is built once. Updates are over-relaxed: plain
    closed-form ICP slides tangentially at a slow linear rate on smooth,
    nearly symmetric heads.
    """
    cfg = problem.cfg
    origin = _probe_origin(problem)
    if origin is None:
        return affine, 0, False, False
    coarse = cfg.probe_coarse_step
    shell = getattr(problem.field, "shell_width", None)
    if shell:
        coarse = min(coarse, float(shell))
    target, _ = probe_surface_points(
        problem.field, origin, n_directions=cfg.probe_directions,
        t_max=cfg.probe_t_max, coarse_step=coarse,
        alpha=cfg.level_set_alpha, alpha_frac=cfg.level_set_alpha_frac)
    if len(target) < 4:
        return affine, 0, False, False
    index = TriangleIndex(problem.mesh.vertices, problem.mesh.faces)
    # absorb gross translation before trusting nearest-neighbor assignments
    shift = target.mean(axis=0) - affine.apply(problem.mesh.vertices).mean(axis=0)
    if np.linalg.norm(shift) > 0.01:
        affine = AffineParams(A=affine.A, b=affine.b + shift)
    iterations = 0
    hit_tol = False
    for _ in range(cfg.max_icp_iterations):
        iterations += 1
        pulled = (target - affine.b) @ np.linalg.inv(affine.A).T
        _, src = _closest_surface_points(index, pulled)
        fitted = fit_similarity(src, target)
        if np.linalg.det(fitted.A) <= 0:  # reject mirror solutions
            break
        v_old, v_new = affine.to_vector(), fitted.to_vector()
        delta = np.max(np.abs(v_new - v_old))
        if delta < cfg.icp_tol:
            affine = fitted
            hit_tol = True
            break
        relaxed = AffineParams.from_vector(v_old + cfg.icp_relaxation * (v_new - v_old))
        affine = relaxed if np.linalg.det(relaxed.A) > 0 else fitted
    return affine, iterations, True, hit_tol


def _visible_vertices(mesh, rig):
    _, _, frags = rasterize(mesh, rig)
    fids = np.unique(frags.face_index[frags.face_index >= 0])
    vids = np.unique(mesh.faces[fids].ravel())
    return vids


def _icp_phase(problem, affine):
    """Frozen-correspondence ICP against the level set + backprojected depth."""
    mesh, rig, cfg = problem.mesh, problem.rig, problem.cfg
    targets = [problem.level_set_world]
    # backproject the generator depth map into world space
    dg = problem.d_gen
    if dg.valid.any():
        w, h = rig.resolution
        rr, cc = np.nonzero(dg.valid)
        z = dg.values[rr, cc]
        intr = rig.intrinsics
        u = (cc + 0.5) / w
        v = (rr + 0.5) / h
        cam = np.stack([(u - intr.cx) / intr.fx * z,
                        (v - intr.cy) / intr.fy * z, z], axis=1)
        R, t = rig.extrinsics.R, rig.extrinsics.t
        targets.append((cam - t) @ R)
    target = np.concatenate([t for t in targets if len(t)], axis=0)
    if len(target) < 4:
        return affine, 0
    tree = cKDTree(target)
    vids = _visible_vertices(mesh, rig)
    src = np.concatenate([mesh.vertices[vids], problem.landmarks], axis=0)
    # both clouds cover the visible cap; matching their centroids absorbs the
    # bulk of the translation so the NN assignments start out sane
    if np.allclose(affine.A, np.eye(3)) and np.allclose(affine.b, 0.0):
        affine = AffineParams(A=affine.A,
                              b=target.mean(axis=0) - affine.apply(src).mean(axis=0))
    prev_assign = None
    iterations = 0
    for _ in range(cfg.max_icp_iterations):
        moved = affine.apply(src)
        _, idx = tree.query(moved, workers=-1)
        iterations += 1
        if prev_assign is not None and np.array_equal(idx, prev_assign):
            break
        prev_assign = idx
        # similarity update: a full affine fit collapses the shallow visible
        # cap along the view axis; the refine phase restores the missing DOFs
        cand = fit_similarity(src, target[idx])
        if np.linalg.det(cand.A) <= 0:  # reject mirror solutions
            break
        affine = cand
    return affine, iterations


def _refine_phase(problem, affine, trace):
    """Greedy descent with adaptive per-parameter steps; central differences."""
    cfg = problem.cfg
    x = affine.to_vector()
    steps = np.full(12, cfg.refine_step)
    loss = problem.total_loss(AffineParams.from_vector(x))
    h = cfg.fd_step
    prev_sign = np.zeros(12)
    iterations = 0
    converged = False
    for _ in range(cfg.max_refine_iterations):
        iterations += 1
        grad = np.empty(12)
        for i in range(12):
            e = np.zeros(12)
            e[i] = h
            lp = problem.total_loss(AffineParams.from_vector(x + e))
            lm = problem.total_loss(AffineParams.from_vector(x - e))
            grad[i] = (lp - lm) / (2 * h)
        sign = np.sign(grad)
        steps = np.where(sign * prev_sign > 0, steps * 1.3,
                         np.where(sign * prev_sign < 0, steps * 0.5, steps))
        prev_sign = sign
        cand_x = x - steps * sign
        shrink = 0
        while shrink < 6:
            cand = AffineParams.from_vector(cand_x)
            if np.linalg.det(cand.A) > 0:
                cand_loss = problem.total_loss(cand)
                if cand_loss <= loss:
                    break
            steps *= 0.5
            cand_x = x - steps * sign
            shrink += 1
        else:
            converged = True
            break
        delta = np.max(np.abs(cand_x - x))
        improved = loss - cand_loss
        x = cand_x
        loss = cand_loss
        trace.append(loss)
        if delta < cfg.param_tol or improved < cfg.loss_tol:
            converged = True
            break
    return AffineParams.from_vector(x), loss, iterations, converged


def optimize_alignment(mesh, fieldv, rig, cfg=None, march_cfg=None):
    """Recover T_a; returns (AffineParams, AlignmentReport)."""
    cfg = cfg or AlignConfig()
    problem = AlignmentProblem(mesh, fieldv, rig, cfg, march_cfg)
    identity = AffineParams.identity()
    id_loss = problem.total_loss(identity)
    trace = [id_loss]

    best, best_loss = identity, id_loss
    coarse, icp_iters, probed, icp_converged = _surface_icp_phase(problem, identity)
    if not probed:
        # field too sparse to probe; fall back to matching rendered clouds
        coarse, icp_iters = _icp_phase(problem, identity)
        icp_converged = icp_iters < cfg.max_icp_iterations
    coarse_loss = problem.total_loss(coarse)
    trace.append(coarse_loss)
    if coarse_loss < best_loss:
        best, best_loss = coarse, coarse_loss

    refined, refined_loss, fd_iters, refine_converged = _refine_phase(problem, best, trace)
    if refined_loss < best_loss:
        best, best_loss = refined, refined_loss
    # never worse than the identity initialization
    if best_loss > id_loss:
        best, best_loss = identity, id_loss

    total, ld, lc, ddeg, cdeg = problem.total_loss(best, detail=True)
    report = AlignmentReport(
        depth_loss=ld, chamfer_loss=lc, iterations=fd_iters,
        converged=icp_converged or refine_converged, loss_trace=trace,
        affine=best, icp_iterations=icp_iters,
        depth_term_degenerate=ddeg, chamfer_term_degenerate=cdeg)
    return best, report
