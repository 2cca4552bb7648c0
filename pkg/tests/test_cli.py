"""CLI behavior: exit codes, JSON output, overrides, and error paths."""

import json
import os

import numpy as np
import pytest

from headsynth import io_formats
from headsynth.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


GEN_ARGS = ("--n", "2", "--seed", "3", "--resolution", "32x32",
            "--set", "annotations_only=true")


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--bogus-flag"])
    assert exc.value.code == 2


def test_missing_subcommand_exits_two():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_generate_inspect_report_roundtrip(tmp_path, capsys):
    out = str(tmp_path / "ds")
    code, stdout, stderr = run(capsys, "generate", "--out", out, "--json",
                               *GEN_ARGS)
    assert code == 0
    payload = json.loads(stdout)
    assert payload["n_samples"] == 2
    assert os.path.exists(payload["manifest"])
    assert "samples/s" in stderr

    code, stdout, _ = run(capsys, "inspect", out, "--json")
    assert code == 0
    assert json.loads(stdout)["failures"] == []

    rep = str(tmp_path / "rep")
    code, stdout, _ = run(capsys, "report", out, "--out", rep, "--json")
    assert code == 0
    files = json.loads(stdout)["files"]
    assert any(f.endswith("summary.csv") for f in files)
    assert any(f.endswith(".png") for f in files)
    for f in files:
        assert os.path.exists(f)


def test_inspect_flags_corruption_exit_one(tmp_path, capsys):
    out = str(tmp_path / "ds")
    assert run(capsys, "generate", "--out", out, *GEN_ARGS)[0] == 0
    victim = os.path.join(out, "00000000", "seg.pgm")
    with open(victim, "r+b") as fh:
        fh.seek(-1, 2)
        fh.write(b"\xff")
    code, stdout, stderr = run(capsys, "inspect", out, "--json")
    assert code == 1
    failures = json.loads(stdout)["failures"]
    assert len(failures) == 1 and "seg.pgm" in failures[0]


def test_generate_unknown_root_key_exits_two(capsys, tmp_path):
    code, _, stderr = run(capsys, "generate", "--out", str(tmp_path / "x"),
                          "--set", "bogus_key=1")
    assert code == 2
    assert "bogus_key" in stderr


def test_generate_bad_nested_key_exits_two(capsys, tmp_path):
    code, _, stderr = run(capsys, "generate", "--out", str(tmp_path / "x"),
                          "--set", "march.zoom=3")
    assert code == 2
    assert "zoom" in stderr


def test_generate_type_mismatch_exits_two(capsys, tmp_path):
    code, _, stderr = run(capsys, "generate", "--out", str(tmp_path / "x"),
                          "--set", "annotations_only=7")
    assert code == 2
    assert "boolean" in stderr


def test_generate_bad_resolution_exits_two(capsys, tmp_path):
    code, _, stderr = run(capsys, "generate", "--out", str(tmp_path / "x"),
                          "--resolution", "notxres")
    assert code == 2


def test_render_writes_products(tmp_path, capsys):
    out = str(tmp_path / "r")
    code, stdout, _ = run(capsys, "render", "--out", out,
                          "--resolution", "48x48", "--json")
    assert code == 0
    payload = json.loads(stdout)
    assert payload["covered_px"] > 0
    for name in ("depth.pfm", "seg.pgm", "landmarks.json", "camera.json"):
        assert os.path.exists(os.path.join(out, name))


def test_align_happy_path_and_bad_inputs(tmp_path, capsys):
    from headsynth.headmodel import HeadParams, builtin_head, \
        mesh_to_density, synthesize_mesh
    from headsynth.volume import VoxelGrid
    from headsynth import camera as cam

    asset = builtin_head(2, 2, subdivision=2)
    mesh = synthesize_mesh(asset, HeadParams(np.zeros(2), np.zeros(2),
                                             np.zeros(3)))
    obj = tmp_path / "head.obj"
    io_formats.write_obj(obj, mesh.vertices, mesh.faces)
    field = mesh_to_density(mesh, shell_width=0.006, sigma0=1500.0)
    grid = VoxelGrid.from_field(field, (48, 48, 48))
    dvox = tmp_path / "head.dvox"
    grid.save(dvox)
    rig = cam.CameraRig(intrinsics=cam.build_intrinsics(20.0),
                        extrinsics=cam.look_at_extrinsics(0.0, 0.0, 2.7),
                        resolution=(64, 64))
    camera_json = tmp_path / "camera.json"
    io_formats.dump_json(camera_json, rig.to_json_dict())

    out = str(tmp_path / "out")
    code, stdout, _ = run(capsys, "align", "--mesh", str(obj),
                          "--dvox", str(dvox), "--camera", str(camera_json),
                          "--out", out, "--json")
    assert code == 0
    payload = json.loads(stdout)
    assert payload["converged"] is True
    assert os.path.exists(os.path.join(out, "align.json"))

    # unreadable voxel grid is a usage-level failure for align
    bad = tmp_path / "bad.dvox"
    bad.write_bytes(b"nope" + b"\0" * 64)
    code, _, stderr = run(capsys, "align", "--mesh", str(obj),
                          "--dvox", str(bad), "--camera", str(camera_json),
                          "--out", out)
    assert code == 2
    assert "bad.dvox" in stderr


def test_selfcheck_passes(capsys):
    code, _, stderr = run(capsys, "selfcheck")
    assert code == 0
    assert "ok" in stderr


def test_quiet_silences_stderr(tmp_path, capsys):
    out = str(tmp_path / "ds")
    code, stdout, stderr = run(capsys, "generate", "--out", out, "--quiet",
                               *GEN_ARGS)
    assert code == 0
    assert stderr == ""
    assert stdout == ""  # no --json either
