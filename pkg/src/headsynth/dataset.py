"""Deterministic dataset generation: sample, synthesize, render, align, write.

Each sample is derived from (master_seed, index) through a cryptographic
hash, so samples are independent and the output bytes do not depend on
thread count or generation order. The manifest is written last and records
a content digest per file.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import camera as camera_mod
from . import io_formats
from . import volume as volume_mod
from .align import AffineParams, AlignConfig, AlignmentProblem, AlignmentReport, \
    optimize_alignment
from .headmodel import HeadParams, builtin_head, landmarks3d, load_asset, \
    mesh_to_density, sample_params, synthesize_mesh
from .raster import ClassMap, DepthMap, project_landmarks, rasterize

FORMAT_VERSION = 1

_SKIN = np.array([0.80, 0.62, 0.52])


def _standin_radiance(points, directions):
    """Fixed skin-tone emitter with a mild vertical shade, for rgb stand-ins."""
    shade = 0.85 + 0.8 * np.clip(points[:, 1], -0.12, 0.12)
    return shade[:, None] * _SKIN


@dataclass
class HiddenTransformConfig:
    """Magnitudes of the seeded perturbation applied to the generator mesh."""

    scale_max: float = 0.0
    rot_max_deg: float = 0.0
    trans_max_m: float = 0.0

    def __post_init__(self):
        if self.scale_max < 0 or self.rot_max_deg < 0 or self.trans_max_m < 0:
            raise ValueError("hidden transform magnitudes must be nonnegative")

    @property
    def is_identity(self):
        return self.scale_max == 0 and self.rot_max_deg == 0 \
            and self.trans_max_m == 0

    def sample(self, rng):
        if self.is_identity:
            return AffineParams.identity()
        s = rng.uniform(1.0 - self.scale_max, 1.0 + self.scale_max)
        axis = rng.uniform(-1.0, 1.0, 3)
        axis /= max(np.linalg.norm(axis), 1e-12)
        angle = rng.uniform(0.0, np.deg2rad(self.rot_max_deg))
        R = Rotation.from_rotvec(axis * angle).as_matrix()
        t = rng.uniform(-self.trans_max_m, self.trans_max_m, 3)
        return AffineParams(A=s * R, b=t)


_CONFIG_KEYS = {"n_samples", "master_seed", "resolution", "march", "align",
                "hidden_transform", "asset", "shell", "rgb",
                "annotations_only"}


@dataclass
class DatasetConfig:
    n_samples: int = 10
    master_seed: int = 0
    resolution: tuple = (128, 128)
    march: dict = field(default_factory=dict)          # MarchConfig overrides
    align: dict = field(default_factory=dict)          # AlignConfig overrides
    hidden_transform: HiddenTransformConfig = field(
        default_factory=HiddenTransformConfig)
    asset: str = "builtin"                             # "builtin" or a path
    shell: dict = field(default_factory=lambda: {"width": 0.004,
                                                 "sigma0": 2000.0})
    rgb: bool = False
    annotations_only: bool = False  # rasterized products only; no field work

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if min(self.resolution) < 1:
            raise ValueError("resolution must be positive")
        if isinstance(self.hidden_transform, dict):
            self.hidden_transform = HiddenTransformConfig(**self.hidden_transform)

    @classmethod
    def from_json_dict(cls, d):
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json_dict(self):
        ht = self.hidden_transform
        return {"n_samples": self.n_samples, "master_seed": self.master_seed,
                "resolution": list(self.resolution), "march": dict(self.march),
                "align": dict(self.align),
                "hidden_transform": {"scale_max": ht.scale_max,
                                     "rot_max_deg": ht.rot_max_deg,
                                     "trans_max_m": ht.trans_max_m},
                "asset": self.asset, "shell": dict(self.shell),
                "rgb": self.rgb, "annotations_only": self.annotations_only}

    def fingerprint(self):
        js = io_formats.canonical_json(self.to_json_dict())
        return hashlib.sha256(js.encode()).hexdigest()

    def march_config(self):
        m = dict(self.march)
        m.pop("alpha", None)  # the level-set threshold belongs to alignment
        return volume_mod.MarchConfig(**m)

    def align_config(self):
        a = dict(self.align)
        if "alpha" in self.march and "level_set_alpha" not in a:
            a["level_set_alpha"] = self.march["alpha"]
        return AlignConfig(**a)


def sample_seed(master_seed, index):
    """256-bit per-sample seed, stable across platforms and runs."""
    payload = b"headsynth-sample" + \
        int(master_seed).to_bytes(8, "big") + int(index).to_bytes(8, "big")
    return hashlib.sha256(payload).hexdigest()


@dataclass
class AnnotationBundle:
    """Everything generated for one sample."""

    index: int
    seed: str
    params: HeadParams
    rig: camera_mod.CameraRig
    depth_mesh: DepthMap
    seg: ClassMap
    landmarks2d: np.ndarray          # (68, 2) normalized uv
    landmarks_visible: np.ndarray    # (68,) bool
    landmarks3d: np.ndarray          # (68, 3) world, aligned mesh
    depth_vol: DepthMap = None
    rgb: np.ndarray = None           # (H, W, 3) uint8
    report: AlignmentReport = None
    hidden: AffineParams = None

    def __post_init__(self):
        res = self.depth_mesh.resolution
        if self.seg.resolution != res:
            raise ValueError("raster products must share a resolution")
        if self.depth_vol is not None and self.depth_vol.resolution != res:
            raise ValueError("raster products must share a resolution")
        if len(self.landmarks2d) != len(self.landmarks3d) or \
                len(self.landmarks2d) != len(self.landmarks_visible):
            raise ValueError("landmark arrays must share a length")


def _load_asset(spec):
    """`builtin`, or a directory holding head.obj / classes.pgm /
    landmarks.json / classes.json."""
    if spec == "builtin":
        return builtin_head()
    table = os.path.join(spec, "classes.json")
    return load_asset(os.path.join(spec, "head.obj"),
                      os.path.join(spec, "classes.pgm"),
                      os.path.join(spec, "landmarks.json"),
                      table if os.path.exists(table) else None)


def generate_sample(master_seed, index, asset, cfg):
    """Generate one AnnotationBundle; fully determined by the arguments."""
    seed_hex = sample_seed(master_seed, index)
    rng = np.random.default_rng(int(seed_hex, 16))
    n_beta = asset.shape_basis.shape[2]
    n_psi = asset.expr_basis.shape[2]
    params = sample_params(rng, n_beta=n_beta, n_psi=n_psi)
    rig = camera_mod.sample_camera(
        rng, camera_mod.CameraSamplingConfig(resolution=cfg.resolution))
    mesh = synthesize_mesh(asset, params)
    hidden = cfg.hidden_transform.sample(rng)

    depth_vol = rgb = report = None
    affine = AffineParams.identity()
    if not cfg.annotations_only:
        gen_mesh = mesh.transformed(hidden.A, hidden.b)
        fieldv = mesh_to_density(
            gen_mesh, shell_width=cfg.shell["width"], sigma0=cfg.shell["sigma0"],
            radiance_fn=_standin_radiance if cfg.rgb else None)
        march = cfg.march_config()
        align_cfg = cfg.align_config()
        if cfg.hidden_transform.is_identity:
            # already aligned by construction; record the losses at identity
            problem = AlignmentProblem(mesh, fieldv, rig, align_cfg, march)
            _, ld, lc, ddeg, cdeg = problem.total_loss(affine, detail=True)
            report = AlignmentReport(
                depth_loss=ld, chamfer_loss=lc, iterations=0, converged=True,
                loss_trace=[align_cfg.w_depth * ld + align_cfg.w_chamfer * lc],
                affine=affine, depth_term_degenerate=ddeg,
                chamfer_term_degenerate=cdeg)
        else:
            affine, report = optimize_alignment(mesh, fieldv, rig, align_cfg,
                                                march)
        depth_vol = volume_mod.render_depth_map(fieldv, rig, march)
        if cfg.rgb:
            img = volume_mod.render_rgb(fieldv, rig, march)
            rgb = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    aligned = mesh.transformed(affine.A, affine.b)
    depth_mesh, seg, _ = rasterize(aligned, rig)
    lm3d = landmarks3d(aligned)
    lm2d, visible = project_landmarks(aligned, rig, depth_mesh, lm3d)
    return AnnotationBundle(
        index=index, seed=seed_hex, params=params, rig=rig,
        depth_mesh=depth_mesh, seg=seg, landmarks2d=lm2d,
        landmarks_visible=visible, landmarks3d=lm3d, depth_vol=depth_vol,
        rgb=rgb, report=report, hidden=hidden)


def sample_dirname(index):
    return f"{index:08d}"


def expected_files(cfg):
    names = ["depth_mesh.pfm", "seg.pgm", "landmarks.json", "camera.json",
             "params.json"]
    if not cfg.annotations_only:
        names = ["depth_vol.pfm"] + names + ["align.json"]
        if cfg.rgb:
            names = ["rgb.pnm"] + names
    return names


def write_sample(bundle, sample_dir):
    """Write one sample's files; returns {relative name: sha256 hex}."""
    os.makedirs(sample_dir, exist_ok=True)
    written = []
    if bundle.rgb is not None:
        io_formats.write_pnm(os.path.join(sample_dir, "rgb.pnm"), bundle.rgb)
        written.append("rgb.pnm")
    if bundle.depth_vol is not None:
        io_formats.write_pfm(os.path.join(sample_dir, "depth_vol.pfm"),
                             bundle.depth_vol.values, bundle.depth_vol.valid)
        written.append("depth_vol.pfm")
    io_formats.write_pfm(os.path.join(sample_dir, "depth_mesh.pfm"),
                         bundle.depth_mesh.values, bundle.depth_mesh.valid)
    written.append("depth_mesh.pfm")
    io_formats.write_pgm(os.path.join(sample_dir, "seg.pgm"),
                         bundle.seg.values)
    written.append("seg.pgm")
    io_formats.dump_json(os.path.join(sample_dir, "landmarks.json"), {
        "uv": [[float(x) for x in p] for p in bundle.landmarks2d],
        "visible": [bool(v) for v in bundle.landmarks_visible],
        "xyz": [[float(x) for x in p] for p in bundle.landmarks3d],
    })
    written.append("landmarks.json")
    io_formats.dump_json(os.path.join(sample_dir, "camera.json"),
                         bundle.rig.to_json_dict())
    written.append("camera.json")
    params = bundle.params.to_json_dict()
    params["seed"] = bundle.seed
    params["index"] = bundle.index
    if bundle.hidden is not None:
        params["hidden_transform"] = [float(x)
                                      for x in bundle.hidden.matrix.ravel()]
    io_formats.dump_json(os.path.join(sample_dir, "params.json"), params)
    written.append("params.json")
    if bundle.report is not None:
        io_formats.dump_json(os.path.join(sample_dir, "align.json"),
                             bundle.report.to_json_dict())
        written.append("align.json")
    return {name: io_formats.file_digest(os.path.join(sample_dir, name))
            for name in written}


def read_bundle(sample_dir, n_classes=9):
    """Read a sample directory back into an AnnotationBundle."""
    p = lambda name: os.path.join(sample_dir, name)
    vals, _ = io_formats.read_pfm(p("depth_mesh.pfm"))
    depth_mesh = DepthMap.from_sentinel(vals)
    seg_vals = io_formats.read_pgm(p("seg.pgm"))
    if seg_vals.max() >= n_classes:
        raise io_formats.FormatError(
            f"seg.pgm contains class id {int(seg_vals.max())} "
            f">= class count {n_classes}")
    seg = ClassMap(values=seg_vals)
    lm = io_formats.load_json(p("landmarks.json"))
    cam = camera_mod.CameraRig.from_json_dict(io_formats.load_json(p("camera.json")))
    par = io_formats.load_json(p("params.json"))
    params = HeadParams.from_json_dict(par)
    depth_vol = None
    if os.path.exists(p("depth_vol.pfm")):
        depth_vol = DepthMap.from_sentinel(io_formats.read_pfm(p("depth_vol.pfm"))[0])
    rgb = io_formats.read_pnm(p("rgb.pnm")) if os.path.exists(p("rgb.pnm")) else None
    report = None
    if os.path.exists(p("align.json")):
        report = AlignmentReport.from_json_dict(io_formats.load_json(p("align.json")))
    hidden = None
    if "hidden_transform" in par:
        M = np.asarray(par["hidden_transform"], dtype=np.float64).reshape(3, 4)
        hidden = AffineParams(A=M[:, :3], b=M[:, 3])
    return AnnotationBundle(
        index=int(par["index"]), seed=par["seed"], params=params, rig=cam,
        depth_mesh=depth_mesh, seg=seg,
        landmarks2d=np.asarray(lm["uv"], dtype=np.float64),
        landmarks_visible=np.asarray(lm["visible"], dtype=bool),
        landmarks3d=np.asarray(lm["xyz"], dtype=np.float64),
        depth_vol=depth_vol, rgb=rgb, report=report, hidden=hidden)


def _generate_one(args):
    out_dir, cfg_dict, index = args
    cfg = DatasetConfig.from_json_dict(cfg_dict)
    asset = _asset_cache(cfg.asset)
    bundle = generate_sample(cfg.master_seed, index, asset, cfg)
    sdir = os.path.join(out_dir, sample_dirname(index))
    return index, write_sample(bundle, sdir)


_ASSETS = {}


def _asset_cache(spec):
    if spec not in _ASSETS:
        _ASSETS[spec] = _load_asset(spec)
    return _ASSETS[spec]


def _sample_complete(out_dir, cfg, index):
    sdir = os.path.join(out_dir, sample_dirname(index))
    return all(os.path.exists(os.path.join(sdir, name))
               for name in expected_files(cfg))


def generate_dataset(cfg, out_dir, threads=1):
    """Generate all samples (resuming past complete ones) and the manifest.

    Returns the manifest dict. Samples are generated in parallel; the
    manifest is assembled in index order afterward so thread count never
    changes the output.
    """
    os.makedirs(out_dir, exist_ok=True)
    todo = [i for i in range(cfg.n_samples)
            if not _sample_complete(out_dir, cfg, i)]
    cfg_dict = cfg.to_json_dict()
    jobs = [(out_dir, cfg_dict, i) for i in todo]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_generate_one, jobs))
    else:
        for job in jobs:
            _generate_one(job)
    samples = []
    for i in range(cfg.n_samples):
        sdir = os.path.join(out_dir, sample_dirname(i))
        files = {name: io_formats.file_digest(os.path.join(sdir, name))
                 for name in expected_files(cfg)}
        samples.append({"dir": sample_dirname(i), "files": files})
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_id": cfg.fingerprint(),
        "master_seed": cfg.master_seed,
        "n_samples": cfg.n_samples,
        "config": cfg_dict,
        "samples": samples,
    }
    io_formats.dump_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def verify_dataset(out_dir):
    """Check every manifest digest against the file on disk.

    Returns a list of failure strings (empty when the dataset is intact).
    """
    manifest = io_formats.load_json(os.path.join(out_dir, "manifest.json"))
    failures = []
    if len(manifest["samples"]) != manifest["n_samples"]:
        failures.append("manifest sample count mismatch")
    for entry in manifest["samples"]:
        for name, digest in entry["files"].items():
            path = os.path.join(out_dir, entry["dir"], name)
            if not os.path.exists(path):
                failures.append(f"missing file: {path}")
            elif io_formats.file_digest(path) != digest:
                failures.append(f"digest mismatch: {path}")
    return failures
