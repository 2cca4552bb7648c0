"""Alignment: chamfer oracle, closed-form fits, surface probing, and
end-to-end transform recovery on the shell density field."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from headsynth import camera as cam
from headsynth.align import AffineParams, AlignConfig, AlignmentReport, \
    chamfer, chamfer_bruteforce, depth_loss, fit_affine_lsq, fit_similarity, \
    optimize_alignment, probe_surface_points
from headsynth.headmodel import HeadParams, builtin_head, mesh_to_density, \
    synthesize_mesh
from headsynth.raster import DepthMap
from headsynth.volume import MarchConfig


def frontal_rig(fov=20.0, res=(64, 64)):
    return cam.CameraRig(intrinsics=cam.build_intrinsics(fov),
                         extrinsics=cam.look_at_extrinsics(
                             0.0, 0.0, cam.CAMERA_DISTANCE_M),
                         resolution=res)


@pytest.fixture(scope="module")
def head_mesh():
    asset = builtin_head(5, 5, subdivision=2)
    return synthesize_mesh(asset, HeadParams(np.zeros(5), np.zeros(5),
                                             np.zeros(3)))


def march_cfg():
    return MarchConfig(t_near=2.2, t_far=3.2, n_samples=512)


def test_chamfer_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=(rng.integers(1, 40), 3))
        b = rng.normal(size=(rng.integers(1, 40), 3))
        assert chamfer(a, b) == pytest.approx(chamfer_bruteforce(a, b),
                                              rel=1e-12)


def test_chamfer_zero_iff_identical_sets():
    pts = np.random.default_rng(1).normal(size=(25, 3))
    assert chamfer(pts, pts) == 0.0
    assert chamfer(pts, pts + 1e-3) > 0.0
    with pytest.raises(ValueError):
        chamfer(pts, np.empty((0, 3)))


def test_depth_loss_counts_joint_support():
    a = DepthMap(values=np.array([[1.0, 2.0], [3.0, 4.0]]),
                 valid=np.array([[True, True], [False, True]]))
    b = DepthMap(values=np.array([[1.5, 2.0], [9.0, 5.0]]),
                 valid=np.array([[True, False], [True, True]]))
    loss, count = depth_loss(a, b)
    assert count == 2
    assert loss == pytest.approx(0.25 + 1.0)
    with pytest.raises(ValueError):
        depth_loss(a, DepthMap(values=np.zeros((3, 3)),
                               valid=np.zeros((3, 3), dtype=bool)))


def test_affine_params_vector_roundtrip_and_apply():
    rng = np.random.default_rng(2)
    p = AffineParams(A=np.eye(3) + 0.1 * rng.normal(size=(3, 3)),
                     b=rng.normal(size=3))
    q = AffineParams.from_vector(p.to_vector())
    assert np.array_equal(q.A, p.A) and np.array_equal(q.b, p.b)
    x = rng.normal(size=(7, 3))
    assert np.allclose(p.apply(x), x @ p.A.T + p.b, atol=1e-15)
    ident = AffineParams.identity()
    assert np.array_equal(ident.apply(x), x)


def test_fit_affine_recovers_exact_transform():
    rng = np.random.default_rng(3)
    true_A = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
    true_b = rng.normal(size=3)
    src = rng.normal(size=(30, 3))  # generic: affinely independent
    dst = src @ true_A.T + true_b
    fit = fit_affine_lsq(src, dst)
    assert np.allclose(fit.A, true_A, atol=1e-9)
    assert np.allclose(fit.b, true_b, atol=1e-9)
    with pytest.raises(ValueError):
        fit_affine_lsq(src[:3], dst[:3])


def test_fit_similarity_recovers_scaled_rotation():
    rng = np.random.default_rng(4)
    R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    s, t = 1.07, rng.normal(size=3)
    src = rng.normal(size=(50, 3))
    dst = s * src @ R.T + t
    fit = fit_similarity(src, dst)
    assert np.allclose(fit.A, s * R, atol=1e-9)
    assert np.allclose(fit.b, t, atol=1e-9)
    # the fitted linear part is a positive similarity even under noise
    noisy = fit_similarity(src, dst + 0.01 * rng.normal(size=dst.shape))
    AtA = noisy.A.T @ noisy.A
    assert np.allclose(AtA, AtA[0, 0] * np.eye(3), atol=1e-12)
    assert np.linalg.det(noisy.A) > 0


def test_probe_surface_points_hits_shell_midsurface(head_mesh):
    field = mesh_to_density(head_mesh, shell_width=0.004, sigma0=2000.0)
    pts, alpha = probe_surface_points(field, origin=np.zeros(3),
                                      n_directions=400)
    assert len(pts) > 300
    assert alpha > 0
    from headsynth.geometry import TriangleIndex
    index = TriangleIndex(head_mesh.vertices, head_mesh.faces)
    d = index.distance(pts)
    assert np.quantile(d, 0.95) < 5e-4  # sub-half-millimeter surface samples


def test_report_json_roundtrip():
    rep = AlignmentReport(depth_loss=0.5, chamfer_loss=0.125, iterations=3,
                          converged=True, loss_trace=[1.0, 0.7, 0.5],
                          affine=AffineParams(A=1.05 * np.eye(3),
                                              b=np.array([0.01, 0.0, -0.02])),
                          icp_iterations=42)
    back = AlignmentReport.from_json_dict(rep.to_json_dict())
    assert back.depth_loss == rep.depth_loss
    assert back.chamfer_loss == rep.chamfer_loss
    assert back.iterations == 3 and back.icp_iterations == 42
    assert back.converged
    assert np.allclose(back.affine.matrix, rep.affine.matrix, atol=1e-15)


def test_identity_alignment_converges_quickly(head_mesh):
    field = mesh_to_density(head_mesh, shell_width=0.004, sigma0=2000.0)
    rig = frontal_rig()
    _, report = optimize_alignment(head_mesh, field, rig,
                                AlignConfig(resolution=64),
                                march_cfg=march_cfg())
    assert report.converged
    assert report.iterations <= 3
    err = np.linalg.norm(report.affine.A - np.eye(3)) \
        + np.linalg.norm(report.affine.b)
    assert err < 0.02


def test_recovers_hidden_similarity_transform(head_mesh):
    rng = np.random.default_rng(11)
    R = Rotation.from_rotvec(rng.normal(size=3) * 0.12).as_matrix()
    s = 1.06
    t = np.array([0.03, -0.02, 0.04])
    moved = head_mesh.transformed(s * R, t)
    field = mesh_to_density(moved, shell_width=0.004, sigma0=2000.0)
    rig = frontal_rig()
    _, report = optimize_alignment(head_mesh, field, rig,
                                AlignConfig(resolution=64),
                                march_cfg=march_cfg())
    # vertex-level recovery error against the hidden transform
    target = head_mesh.vertices @ (s * R).T + t
    got = report.affine.apply(head_mesh.vertices)
    err = np.linalg.norm(got - target, axis=1).mean()
    assert err < 5e-3


def test_alignment_never_worse_than_identity(head_mesh):
    # a field the optimizer cannot match well: far-translated copy
    moved = head_mesh.transformed(np.eye(3), np.array([0.5, 0.5, 0.0]))
    field = mesh_to_density(moved, shell_width=0.004, sigma0=2000.0)
    rig = frontal_rig()
    cfg = AlignConfig(resolution=48)
    from headsynth.align import AlignmentProblem
    problem = AlignmentProblem(head_mesh, field, rig, cfg,
                               march_cfg=march_cfg())
    _, report = optimize_alignment(head_mesh, field, rig, cfg,
                                march_cfg=march_cfg())
    identity_loss = problem.total_loss(AffineParams.identity())
    final_loss = problem.total_loss(report.affine)
    assert final_loss <= identity_loss + 1e-9


def test_align_config_validation():
    with pytest.raises(ValueError):
        AlignConfig(w_depth=-1.0)
    with pytest.raises(ValueError):
        AlignConfig(resolution=0)
