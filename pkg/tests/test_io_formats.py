"""File-format round trips and malformed-input diagnostics."""

import hashlib

import numpy as np
import pytest

from headsynth import io_formats as io


def test_pfm_roundtrip_with_invalid_pixels(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.random((9, 7)).astype(np.float32) * 5.0
    valid = rng.random((9, 7)) > 0.25
    path = tmp_path / "d.pfm"
    io.write_pfm(path, vals, valid)
    back, bvalid = io.read_pfm(path)
    assert back.dtype == np.float32
    assert np.array_equal(bvalid, valid)
    assert np.array_equal(back[valid], vals[valid])
    assert np.all(np.isinf(back[~valid]))


def test_pfm_truncated_body_names_offset(tmp_path):
    path = tmp_path / "d.pfm"
    io.write_pfm(path, np.ones((4, 4), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(io.FormatError, match=r"byte \d+"):
        io.read_pfm(path)


def test_pfm_bad_magic(tmp_path):
    path = tmp_path / "d.pfm"
    path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\0" * 48)
    with pytest.raises(io.FormatError, match="magic"):
        io.read_pfm(path)


def test_pgm_roundtrip(tmp_path):
    img = np.arange(42, dtype=np.uint8).reshape(6, 7)
    path = tmp_path / "s.pgm"
    io.write_pgm(path, img)
    assert np.array_equal(io.read_pgm(path), img)


def test_pnm_roundtrip(tmp_path):
    rgb = np.random.default_rng(1).integers(0, 256, (5, 4, 3)).astype(np.uint8)
    path = tmp_path / "c.pnm"
    io.write_pnm(path, rgb)
    assert np.array_equal(io.read_pnm(path), rgb)


def test_ply_points_roundtrip(tmp_path):
    pts = np.random.default_rng(2).normal(size=(17, 3))
    path = tmp_path / "p.ply"
    io.write_ply_points(path, pts)
    back = io.read_ply_points(path)
    assert np.allclose(back, pts, atol=1e-6)


def test_obj_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(3)
    verts = rng.normal(size=(8, 3))
    faces = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6]])
    path = tmp_path / "m.obj"
    io.write_obj(path, verts, faces)
    v, f, uv = io.read_obj(path)
    assert np.array_equal(v, verts)
    assert np.array_equal(f, faces)
    assert uv is None


def test_obj_with_uv_roundtrip(tmp_path):
    verts = np.eye(3)
    faces = np.array([[0, 1, 2]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
    path = tmp_path / "m.obj"
    io.write_obj(path, verts, faces, uv=uv)
    v, f, buv = io.read_obj(path)
    assert np.array_equal(buv, uv)


def test_obj_out_of_range_face(tmp_path):
    path = tmp_path / "m.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(io.FormatError, match="out of range"):
        io.read_obj(path)


def test_obj_malformed_names_line(tmp_path):
    path = tmp_path / "m.obj"
    path.write_text("v 0 0 0\nv 1 0 zap 0\n")
    with pytest.raises(io.FormatError, match=":2"):
        io.read_obj(path)


def test_dvox_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    vals = rng.random((6, 5, 4)).astype(np.float32)  # (nz, ny, nx)
    lo = np.array([-1.0, -2.0, -3.0])
    hi = np.array([1.0, 2.0, 3.0])
    path = tmp_path / "g.dvox"
    io.write_dvox(path, (4, 5, 6), lo, hi, vals)
    dims, blo, bhi, bvals = io.read_dvox(path)
    assert dims == (4, 5, 6)
    assert np.array_equal(bvals, vals)
    assert np.allclose(blo, lo)
    assert np.allclose(bhi, hi)


def test_dvox_bad_magic(tmp_path):
    path = tmp_path / "g.dvox"
    path.write_bytes(b"XOVD" + b"\0" * 64)
    with pytest.raises(io.FormatError, match="magic"):
        io.read_dvox(path)


def test_canonical_json_is_stable():
    a = io.canonical_json({"b": 1.0 / 3.0, "a": [1, 2]})
    b = io.canonical_json({"a": [1, 2], "b": 1.0 / 3.0})
    assert a == b
    # 17 significant digits survive a parse round trip
    import json
    assert json.loads(a)["b"] == 1.0 / 3.0


def test_file_digest_matches_hashlib(tmp_path):
    path = tmp_path / "x.bin"
    payload = b"digest me" * 100
    path.write_bytes(payload)
    assert io.file_digest(path) == hashlib.sha256(payload).hexdigest()
