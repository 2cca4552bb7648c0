"""Parametric head model: parameter sampling, blendshape synthesis,
landmark embedding, class texture, and the shell density field."""

import numpy as np
import pytest

from headsynth.headmodel import BUILTIN_CLASS_TABLE, HeadParams, \
    builtin_head, landmarks3d, load_asset, mesh_to_density, sample_params, \
    save_asset, synthesize_mesh


@pytest.fixture(scope="module")
def asset():
    return builtin_head(6, 6, subdivision=2)


def zero_params(asset):
    return HeadParams(np.zeros(asset.n_beta), np.zeros(asset.n_psi),
                      np.zeros(3))


def test_sampled_params_stay_in_open_range():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = sample_params(rng, n_beta=10, n_psi=10)
        for arr in (p.beta, p.psi, p.theta):
            assert np.all(arr > -2.0) and np.all(arr < 2.0)


def test_params_reject_non_finite():
    with pytest.raises(ValueError):
        HeadParams(np.array([np.nan]), np.zeros(1), np.zeros(3))
    with pytest.raises(ValueError):
        HeadParams(np.zeros(1), np.array([np.inf]), np.zeros(3))


def test_params_json_roundtrip():
    p = sample_params(np.random.default_rng(3), n_beta=4, n_psi=5)
    q = HeadParams.from_json_dict(p.to_json_dict())
    assert np.array_equal(q.beta, p.beta)
    assert np.array_equal(q.psi, p.psi)
    assert np.array_equal(q.theta, p.theta)


def test_synthesis_is_deterministic_and_linear(asset):
    p = sample_params(np.random.default_rng(1), asset.n_beta, asset.n_psi)
    p = HeadParams(p.beta, p.psi, np.zeros(3))  # keep it in the linear regime
    a = synthesize_mesh(asset, p).vertices
    b = synthesize_mesh(asset, p).vertices
    assert np.array_equal(a, b)
    base = synthesize_mesh(asset, zero_params(asset)).vertices
    half = synthesize_mesh(asset, HeadParams(p.beta / 2, p.psi / 2,
                                             np.zeros(3))).vertices
    assert np.allclose(half - base, (a - base) / 2, atol=1e-12)


def test_theta_applies_rigid_rotation(asset):
    base = synthesize_mesh(asset, zero_params(asset)).vertices
    theta = np.array([0.0, 0.4, 0.0])
    rot = synthesize_mesh(asset, HeadParams(np.zeros(asset.n_beta),
                                            np.zeros(asset.n_psi),
                                            theta)).vertices
    # rigid: pairwise norms preserved
    assert np.allclose(np.linalg.norm(rot, axis=1),
                       np.linalg.norm(base, axis=1), atol=1e-12)
    from scipy.spatial.transform import Rotation
    R = Rotation.from_rotvec(theta).as_matrix()
    assert np.allclose(rot, base @ R.T, atol=1e-12)


def test_deformation_amplitude_is_modest(asset):
    base = synthesize_mesh(asset, zero_params(asset)).vertices
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        p = sample_params(rng, asset.n_beta, asset.n_psi)
        p = HeadParams(p.beta, p.psi, np.zeros(3))
        v = synthesize_mesh(asset, p).vertices
        worst = max(worst, np.abs(v - base).max())
    # deformations are perturbations of a ~0.2 m head, not distortions
    assert 1e-4 < worst < 0.05


def test_deformation_scale_is_mode_count_independent():
    rng = np.random.default_rng(7)

    def rms_offset(n_modes):
        a = builtin_head(n_modes, n_modes, subdivision=1)
        base = synthesize_mesh(a, zero_params(a)).vertices
        acc = 0.0
        for _ in range(30):
            p = sample_params(rng, n_modes, n_modes)
            v = synthesize_mesh(a, HeadParams(p.beta, p.psi,
                                              np.zeros(3))).vertices
            acc += np.sqrt(np.mean((v - base) ** 2))
        return acc / 30

    small, large = rms_offset(2), rms_offset(32)
    assert 0.3 < small / large < 3.0


def test_landmarks_count_and_surface_adhesion(asset):
    mesh = synthesize_mesh(asset, zero_params(asset))
    lm = landmarks3d(mesh)
    assert lm.shape == (68, 2 + 1)
    field = mesh_to_density(mesh, shell_width=0.004, sigma0=1000.0)
    # embedded on triangles, so exactly on the surface: max density
    assert np.allclose(field.sigma(lm), 1000.0, atol=1e-6)


def test_class_texture_ids_match_table(asset):
    ids = set(np.unique(asset.class_texture).tolist())
    assert ids <= set(BUILTIN_CLASS_TABLE)
    assert 1 in ids  # skin base coat covers the texture
    assert len(ids) >= 5  # several distinct regions painted


def test_mismatched_param_length_raises(asset):
    with pytest.raises(ValueError):
        synthesize_mesh(asset, HeadParams(np.zeros(asset.n_beta + 1),
                                          np.zeros(asset.n_psi), np.zeros(3)))


def test_shell_density_ramp():
    asset = builtin_head(2, 2, subdivision=2)
    mesh = synthesize_mesh(asset, zero_params(asset))
    field = mesh_to_density(mesh, shell_width=0.01, sigma0=1500.0)
    v = mesh.vertices[0]
    n = v / np.linalg.norm(v)  # outward direction at a vertex
    on, mid, out = (field.sigma(np.atleast_2d(v + s * n))[0]
                    for s in (0.0, 0.005, 0.02))
    assert on == pytest.approx(1500.0, abs=1e-6)
    assert mid == pytest.approx(750.0, rel=0.05)
    assert out == 0.0
    lo, hi = np.asarray(field.bbox[0]), np.asarray(field.bbox[1])
    assert np.all(lo <= mesh.vertices.min(axis=0) - 0.0099)
    assert np.all(hi >= mesh.vertices.max(axis=0) + 0.0099)


def test_shell_density_input_validation(asset):
    mesh = synthesize_mesh(asset, zero_params(asset))
    with pytest.raises(ValueError):
        mesh_to_density(mesh, shell_width=0.0)
    with pytest.raises(ValueError):
        mesh_to_density(mesh, sigma0=-1.0)


def test_asset_save_load_roundtrip(tmp_path, asset):
    mesh_path = tmp_path / "head.obj"
    tex_path = tmp_path / "classes.pgm"
    emb_path = tmp_path / "landmarks.json"
    table_path = tmp_path / "classes.json"
    save_asset(asset, mesh_path, tex_path, emb_path, table_path)
    back = load_asset(mesh_path, tex_path, emb_path, table_path)
    assert np.array_equal(back.base_vertices, asset.base_vertices)
    assert np.array_equal(back.faces, asset.faces)
    assert np.array_equal(back.class_texture, asset.class_texture)
    assert np.array_equal(back.landmark_faces, asset.landmark_faces)
    assert np.allclose(back.landmark_bary, asset.landmark_bary, atol=1e-15)
    assert back.class_table == asset.class_table
    # loaded assets carry no morph basis; zero-mode synthesis still works
    mesh = synthesize_mesh(back, HeadParams(np.zeros(back.n_beta),
                                            np.zeros(back.n_psi),
                                            np.zeros(3)))
    assert np.array_equal(mesh.vertices, asset.base_vertices)


def test_mesh_transformed_applies_affine(asset):
    mesh = synthesize_mesh(asset, zero_params(asset))
    A = np.diag([1.1, 0.9, 1.0])
    b = np.array([0.01, -0.02, 0.03])
    moved = mesh.transformed(A, b)
    assert np.allclose(moved.vertices, mesh.vertices @ A.T + b, atol=1e-15)
    assert moved.faces is mesh.faces or np.array_equal(moved.faces, mesh.faces)
