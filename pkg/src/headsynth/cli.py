"""Command-line entry point.

Subcommands: generate (dataset), align (mesh to voxel grid), render (one
mesh + camera), inspect (verify a dataset), report (figures + CSV),
selfcheck (invariant suite). Human-readable output goes to stderr;
machine-readable JSON goes to stdout when --json is set. Exit codes:
0 success, 1 runtime/validation failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import align as align_mod
from . import camera as camera_mod
from . import io_formats
from . import losses as losses_mod
from . import volume as volume_mod
from .dataset import DatasetConfig, generate_dataset, verify_dataset
from .headmodel import Mesh, builtin_head, synthesize_mesh, HeadParams, \
    landmarks3d, mesh_to_density
from .raster import project_landmarks, rasterize


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


def _say(args, msg):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


def _emit_json(args, payload):
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))


def _parse_resolution(text):
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except ValueError as exc:
        raise UsageError(f"bad --resolution {text!r}, expected WxH") from exc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(cfg_dict, overrides):
    """Apply dotted-key overrides, type-checking against existing values."""
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"bad --set {item!r}, expected key=value")
        key, _, raw = item.partition("=")
        value = _parse_value(raw)
        node = cfg_dict
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise UsageError(f"unknown config key: {key}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            if node is cfg_dict:
                raise UsageError(f"unknown config key: {key}")
            # nested sections hold sparse overrides; their keys are
            # validated by the section's constructor
            node[leaf] = None
        old = node[leaf]
        if old is not None and not isinstance(old, dict):
            if isinstance(old, bool) and not isinstance(value, bool):
                raise UsageError(f"config key {key} expects a boolean")
            if isinstance(old, (int, float)) and not isinstance(value, bool) \
                    and isinstance(value, (int, float)):
                value = type(old)(value) if not isinstance(old, bool) else value
            elif type(old) is not type(value) and not isinstance(old, bool):
                if isinstance(old, (list, tuple)) and isinstance(value, list):
                    pass
                else:
                    raise UsageError(
                        f"config key {key} expects {type(old).__name__}, "
                        f"got {type(value).__name__}")
        node[leaf] = value
    return cfg_dict


def _build_config(args):
    if args.config:
        cfg_dict = io_formats.load_json(args.config)
    else:
        cfg_dict = DatasetConfig().to_json_dict()
    if args.n is not None:
        cfg_dict["n_samples"] = args.n
    if args.seed is not None:
        cfg_dict["master_seed"] = args.seed
    if args.resolution is not None:
        cfg_dict["resolution"] = list(_parse_resolution(args.resolution))
    _apply_overrides(cfg_dict, args.set)
    try:
        cfg = DatasetConfig.from_json_dict(cfg_dict)
        cfg.march_config()  # fail fast on bad nested keys
        cfg.align_config()
        return cfg
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args):
    cfg = _build_config(args)
    t0 = time.time()
    manifest = generate_dataset(cfg, args.out, threads=args.threads)
    dt = time.time() - t0
    rate = cfg.n_samples / dt if dt > 0 else float("inf")
    _say(args, f"generated {cfg.n_samples} samples in {dt:.1f}s "
               f"({rate:.2f} samples/s) -> {args.out}")
    _emit_json(args, {"n_samples": cfg.n_samples, "seconds": dt,
                      "samples_per_s": rate,
                      "dataset_id": manifest["dataset_id"],
                      "manifest": os.path.join(args.out, "manifest.json")})
    return 0


def _mesh_from_obj(path):
    vertices, faces, uv = io_formats.read_obj(path)
    if uv is None:
        uv = np.zeros((len(faces) * 3, 2))
    return Mesh(vertices=np.asarray(vertices), faces=np.asarray(faces),
                uv=np.asarray(uv), landmark_faces=np.empty(0, dtype=np.int64),
                landmark_bary=np.empty((0, 3)),
                class_texture=np.zeros((1, 1), dtype=np.uint8), class_table={})


def cmd_align(args):
    mesh = _mesh_from_obj(args.mesh)
    grid = volume_mod.VoxelGrid.load(args.dvox)
    rig = camera_mod.CameraRig.from_json_dict(io_formats.load_json(args.camera))
    cfg_kwargs = {}
    if len(mesh.landmark_faces) == 0:
        cfg_kwargs["w_chamfer"] = 0.0  # no landmark embedding in a bare OBJ
    cfg = align_mod.AlignConfig(**cfg_kwargs)
    affine, report = align_mod.optimize_alignment(mesh, grid, rig, cfg)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "align.json")
    io_formats.dump_json(out_path, report.to_json_dict())
    _say(args, f"alignment: depth {report.depth_loss:.6g} chamfer "
               f"{report.chamfer_loss:.6g} converged {report.converged} "
               f"-> {out_path}")
    _emit_json(args, report.to_json_dict())
    return 0


def cmd_render(args):
    resolution = _parse_resolution(args.resolution or "256x256")
    asset = builtin_head()
    if args.seed is not None:
        rng = np.random.default_rng(args.seed)
        from .headmodel import sample_params
        params = sample_params(rng, asset.shape_basis.shape[2],
                               asset.expr_basis.shape[2])
        rig = camera_mod.sample_camera(
            rng, camera_mod.CameraSamplingConfig(resolution=resolution))
    else:
        params = HeadParams(np.zeros(asset.shape_basis.shape[2]),
                            np.zeros(asset.expr_basis.shape[2]), np.zeros(3))
        rig = camera_mod.CameraRig(
            intrinsics=camera_mod.build_intrinsics(20.0),
            extrinsics=camera_mod.look_at_extrinsics(0.0, 0.0,
                                                     camera_mod.CAMERA_DISTANCE_M),
            resolution=resolution)
    mesh = synthesize_mesh(asset, params)
    depth, seg, _ = rasterize(mesh, rig)
    lm3d = landmarks3d(mesh)
    lm2d, visible = project_landmarks(mesh, rig, depth, lm3d)
    os.makedirs(args.out, exist_ok=True)
    io_formats.write_pfm(os.path.join(args.out, "depth.pfm"),
                         depth.values, depth.valid)
    io_formats.write_pgm(os.path.join(args.out, "seg.pgm"), seg.values)
    io_formats.dump_json(os.path.join(args.out, "landmarks.json"), {
        "uv": [[float(x) for x in p] for p in lm2d],
        "visible": [bool(v) for v in visible],
        "xyz": [[float(x) for x in p] for p in lm3d]})
    io_formats.dump_json(os.path.join(args.out, "camera.json"),
                         rig.to_json_dict())
    _say(args, f"rendered {resolution[0]}x{resolution[1]} -> {args.out}")
    _emit_json(args, {"out": args.out,
                      "resolution": list(resolution),
                      "covered_px": int(depth.valid.sum()),
                      "visible_landmarks": int(visible.sum())})
    return 0


def cmd_inspect(args):
    failures = verify_dataset(args.dataset)
    manifest = io_formats.load_json(os.path.join(args.dataset, "manifest.json"))
    _say(args, f"dataset {manifest['dataset_id'][:12]}… "
               f"{manifest['n_samples']} samples, "
               f"{len(failures)} integrity failure(s)")
    for f in failures:
        _say(args, f"  FAIL {f}")
    _emit_json(args, {"dataset_id": manifest["dataset_id"],
                      "n_samples": manifest["n_samples"],
                      "failures": failures})
    return 1 if failures else 0


def cmd_report(args):
    from .report import dataset_report
    written = dataset_report(args.dataset, args.out,
                             max_figures=args.max_figures)
    _say(args, f"wrote {len(written)} report file(s) -> {args.out}")
    _emit_json(args, {"out": args.out, "files": written})
    return 0


def _selfcheck_suite():
    """Small cross-module invariant checks; returns [(name, ok, detail)]."""
    import tempfile
    results = []

    def check(name, fn):
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:  # noqa: BLE001 - report, don't crash
            results.append((name, False, f"{type(exc).__name__}: {exc}"))

    def camera_conformance():
        rng = np.random.default_rng(0)
        for _ in range(500):
            rig = camera_mod.sample_camera(rng)
            assert 12.0 <= rig.intrinsics.fov_deg <= 27.0
            assert rig.distance == camera_mod.CAMERA_DISTANCE_M
            assert abs(rig.azimuth) <= np.pi / 4 + 1e-12
            assert abs(rig.elevation) <= np.pi / 4 + 1e-12

    def io_roundtrip():
        rng = np.random.default_rng(1)
        with tempfile.TemporaryDirectory() as td:
            vals = rng.random((7, 5)).astype(np.float32)
            valid = rng.random((7, 5)) > 0.3
            io_formats.write_pfm(os.path.join(td, "a.pfm"), vals, valid)
            back, bvalid = io_formats.read_pfm(os.path.join(td, "a.pfm"))
            assert np.array_equal(back[bvalid], vals[valid])
            assert np.array_equal(bvalid, valid)
            img = rng.integers(0, 9, (6, 4)).astype(np.uint8)
            io_formats.write_pgm(os.path.join(td, "a.pgm"), img)
            assert np.array_equal(io_formats.read_pgm(os.path.join(td, "a.pgm")), img)

    def chamfer_oracle():
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = rng.random((50, 3))
            b = rng.random((60, 3))
            assert abs(align_mod.chamfer(a, b) -
                       align_mod.chamfer_bruteforce(a, b)) < 1e-9

    def quadrature_sanity():
        fieldv = volume_mod.CallableField(
            lambda p: np.where((p[:, 2] >= 1.0) & (p[:, 2] <= 1.2), 50.0, 0.0),
            bbox=(np.array([-1.0, -1.0, 1.0]), np.array([1.0, 1.0, 1.2])))
        o = np.array([0.0, 0.0, 0.0])
        d = np.array([0.0, 0.0, 1.0])
        cfg = volume_mod.MarchConfig(t_near=0.5, t_far=1.7, n_samples=512)
        depth, opacity = volume_mod.quadrature_depth(fieldv, o, d, cfg)
        assert opacity > 0.99
        assert abs(depth - 1.02) < 0.02

    def loss_invariants():
        assert losses_mod.l1_depth(np.ones((3, 3)), np.ones((3, 3))) == 0.0
        ce = losses_mod.cross_entropy_seg(np.zeros((4, 2, 2)),
                                          np.zeros((2, 2), dtype=int))
        assert abs(ce - np.log(4)) < 1e-12
        assert losses_mod.l2_keypoints(np.array([[3.0, 4.0]]),
                                       np.zeros((1, 2))) == 5.0
        x = losses_mod.FeatureMap(np.random.default_rng(3).random((3, 16, 16)))
        v = losses_mod.ssl_loss(losses_mod.IdentityEncoder(), x,
                                losses_mod.AffineWarp.rotation(17.0))
        assert v <= 1e-9

    def raster_sanity():
        asset = builtin_head(8, 8, subdivision=2)
        mesh = synthesize_mesh(asset, HeadParams(np.zeros(8), np.zeros(8),
                                                 np.zeros(3)))
        rig = camera_mod.CameraRig(
            intrinsics=camera_mod.build_intrinsics(20.0),
            extrinsics=camera_mod.look_at_extrinsics(
                0.0, 0.0, camera_mod.CAMERA_DISTANCE_M),
            resolution=(64, 64))
        depth, seg, _ = rasterize(mesh, rig)
        assert depth.valid.sum() > 50
        assert np.count_nonzero(seg.values) > 50
        _, visible = project_landmarks(mesh, rig, depth)
        assert visible.sum() >= 30

    check("camera-distribution", camera_conformance)
    check("io-roundtrip", io_roundtrip)
    check("chamfer-oracle", chamfer_oracle)
    check("depth-quadrature", quadrature_sanity)
    check("loss-invariants", loss_invariants)
    check("raster-sanity", raster_sanity)
    return results


def cmd_selfcheck(args):
    results = _selfcheck_suite()
    failed = [r for r in results if not r[1]]
    for name, ok, detail in results:
        _say(args, f"  {'ok  ' if ok else 'FAIL'} {name}"
                   f"{(' — ' + detail) if detail else ''}")
    _say(args, f"selfcheck: {len(results) - len(failed)} passed, "
               f"{len(failed)} failed")
    _emit_json(args, {"passed": len(results) - len(failed),
                      "failed": len(failed),
                      "failures": [{"name": n, "detail": d}
                                   for n, ok, d in results if not ok]})
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="headsynth",
        description="3D-aware synthetic head-annotation pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_required=False):
        p.add_argument("--json", action="store_true",
                       help="emit machine-readable JSON on stdout")
        p.add_argument("--quiet", action="store_true",
                       help="suppress human-readable output")

    g = sub.add_parser("generate", help="generate a dataset")
    g.add_argument("--config", help="dataset config JSON path")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--seed", type=int, default=None, help="master seed")
    g.add_argument("--n", type=int, default=None, help="sample count")
    g.add_argument("--resolution", default=None, metavar="WxH")
    common(g)
    g.set_defaults(fn=cmd_generate)

    a = sub.add_parser("align", help="align a mesh to a voxelized density")
    a.add_argument("--mesh", required=True, help="OBJ mesh path")
    a.add_argument("--dvox", required=True, help="DVOX density grid path")
    a.add_argument("--camera", required=True, help="camera JSON path")
    a.add_argument("--out", required=True, help="output directory")
    common(a)
    a.set_defaults(fn=cmd_align)

    r = sub.add_parser("render", help="render one head's annotations")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--resolution", default="256x256", metavar="WxH")
    r.add_argument("--seed", type=int, default=None,
                   help="sample head/camera from this seed (default frontal)")
    common(r)
    r.set_defaults(fn=cmd_render)

    i = sub.add_parser("inspect", help="verify a dataset's digests")
    i.add_argument("dataset", help="dataset directory")
    common(i)
    i.set_defaults(fn=cmd_inspect)

    rp = sub.add_parser("report", help="write preview figures + summary.csv")
    rp.add_argument("dataset", help="dataset directory")
    rp.add_argument("--out", required=True, help="output directory")
    rp.add_argument("--max-figures", type=int, default=None)
    common(rp)
    rp.set_defaults(fn=cmd_report)

    s = sub.add_parser("selfcheck", help="run cross-module invariant checks")
    common(s)
    s.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except io_formats.FormatError as exc:
        # unreadable inputs are usage-level for align/render, data-level
        # for inspect; the message always names the file
        print(f"error: {exc}", file=sys.stderr)
        return 2 if args.subcommand in ("align", "render", "generate") else 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
