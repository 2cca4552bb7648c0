"""Pinhole camera construction, sampling, projection, and ray generation.

Conventions:
- World: subject at the origin, y-up. The frontal camera sits at
  (0, 0, -distance) with the identity rotation.
- Camera: looks down +z; a world point maps to camera space as
  x_cam = R @ x_world + t.
- Image: normalized coordinates, the image spans [0, 1]^2 with the
  principal point at (0.5, 0.5); u grows with camera x, v with camera y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FOV_MIN_DEG = 12.0
FOV_MAX_DEG = 27.0
CAMERA_DISTANCE_M = 2.7
ANGLE_LIMIT_RAD = math.pi / 4


@dataclass(frozen=True)
class Intrinsics:
    """Normalized (resolution-independent) pinhole intrinsics."""

    fov_deg: float
    fx: float
    fy: float
    cx: float = 0.5
    cy: float = 0.5

    @property
    def K(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def pixel_K(self, resolution):
        """Scale rows into pixel units for a (width, height) resolution."""
        w, h = resolution
        K = self.K
        K[0] *= w
        K[1] *= h
        return K


@dataclass(frozen=True)
class Extrinsics:
    """World-to-camera rigid transform x_cam = R @ x_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")

    @property
    def Rt(self):
        return np.hstack([self.R, self.t[:, None]])

    @property
    def camera_center(self):
        return -self.R.T @ self.t


@dataclass(frozen=True)
class CameraRig:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    resolution: tuple  # (width, height)
    azimuth: float = 0.0
    elevation: float = 0.0
    distance: float = CAMERA_DISTANCE_M

    @property
    def P(self):
        return self.intrinsics.K @ self.extrinsics.Rt

    def to_json_dict(self):
        return {
            "fov_deg": float(self.intrinsics.fov_deg),
            "distance_m": float(self.distance),
            "azimuth_rad": float(self.azimuth),
            "elevation_rad": float(self.elevation),
            "K": [float(x) for x in self.intrinsics.K.ravel()],
            "Rt": [float(x) for x in self.extrinsics.Rt.ravel()],
            "width": int(self.resolution[0]),
            "height": int(self.resolution[1]),
        }

    @classmethod
    def from_json_dict(cls, d):
        K = np.asarray(d["K"], dtype=np.float64).reshape(3, 3)
        Rt = np.asarray(d["Rt"], dtype=np.float64).reshape(3, 4)
        intr = Intrinsics(fov_deg=float(d["fov_deg"]), fx=K[0, 0], fy=K[1, 1],
                          cx=K[0, 2], cy=K[1, 2])
        extr = Extrinsics(R=Rt[:, :3], t=Rt[:, 3])
        return cls(intrinsics=intr, extrinsics=extr,
                   resolution=(int(d["width"]), int(d["height"])),
                   azimuth=float(d["azimuth_rad"]),
                   elevation=float(d["elevation_rad"]),
                   distance=float(d["distance_m"]))


@dataclass(frozen=True)
class Rays:
    """One ray per pixel center: origins (H,W,3), unit directions (H,W,3)."""

    origins: np.ndarray
    directions: np.ndarray


@dataclass(frozen=True)
class CameraSamplingConfig:
    fov_range_deg: tuple = (FOV_MIN_DEG, FOV_MAX_DEG)
    distance_m: float = CAMERA_DISTANCE_M
    # `truncnorm`: standard normal scaled by pi/4, clamped to [-pi/4, pi/4]
    # `uniform`: Uniform(-pi/4, pi/4)
    mode: str = "truncnorm"
    angle_limit_rad: float = ANGLE_LIMIT_RAD
    resolution: tuple = (512, 512)

    def validate(self):
        if self.mode not in ("truncnorm", "uniform"):
            raise ValueError(f"unknown angle sampling mode {self.mode!r}")
        lo, hi = self.fov_range_deg
        if not (0.0 < lo <= hi < 180.0):
            raise ValueError(f"invalid fov range {self.fov_range_deg}")
        if self.distance_m <= 0 or self.angle_limit_rad <= 0:
            raise ValueError("distance and angle limit must be positive")


def build_intrinsics(fov_deg, resolution=None):
    """Normalized intrinsics for a vertical field of view in degrees."""
    fov_deg = float(fov_deg)
    if not math.isfinite(fov_deg) or not (0.0 < fov_deg < 180.0):
        raise ValueError(f"fov_deg out of range: {fov_deg}")
    f = 1.0 / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    return Intrinsics(fov_deg=fov_deg, fx=f, fy=f)


def look_at_extrinsics(azimuth, elevation, distance):
    """Camera on a sphere around the origin, looking at the origin, y-up.

    azimuth rotates the camera center about +y starting from (0,0,-d);
    elevation lifts it toward +y.
    """
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    ce, se = math.cos(elevation), math.sin(elevation)
    center = distance * np.array([sa * ce, se, -ca * ce])
    forward = -center / np.linalg.norm(center)  # toward the origin
    up_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_world, forward)
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking straight up/down
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    up = np.cross(forward, right)
    R = np.vstack([right, up, forward])
    t = -R @ center
    return Extrinsics(R=R, t=t)


def sample_camera(rng, cfg=None):
    """Draw a CameraRig; deterministic given (rng state, cfg)."""
    cfg = cfg or CameraSamplingConfig()
    cfg.validate()
    lo, hi = cfg.fov_range_deg
    fov = lo + (hi - lo) * rng.random()
    lim = cfg.angle_limit_rad
    if cfg.mode == "truncnorm":
        azimuth = float(np.clip(rng.standard_normal() * lim, -lim, lim))
        elevation = float(np.clip(rng.standard_normal() * lim, -lim, lim))
    else:
        azimuth = float(rng.uniform(-lim, lim))
        elevation = float(rng.uniform(-lim, lim))
    intr = build_intrinsics(fov)
    extr = look_at_extrinsics(azimuth, elevation, cfg.distance_m)
    return CameraRig(intrinsics=intr, extrinsics=extr, resolution=tuple(cfg.resolution),
                     azimuth=azimuth, elevation=elevation, distance=cfg.distance_m)


def project(P, points, z_eps=1e-9):
    """Project world points with a 3x4 matrix.

    Returns (uv, valid): uv (N,2) normalized image coords, valid False for
    points at or behind the camera plane (uv is NaN there).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    proj = hom @ np.asarray(P).T
    z = proj[:, 2]
    valid = z > z_eps
    uv = np.full((len(pts), 2), np.nan)
    uv[valid] = proj[valid, :2] / z[valid, None]
    return uv, valid


def generate_rays(rig):
    """One world-space ray per pixel center."""
    w, h = rig.resolution
    if w < 1 or h < 1:
        raise ValueError("resolution must be at least 1x1")
    intr, extr = rig.intrinsics, rig.extrinsics
    cols = (np.arange(w) + 0.5) / w
    rows = (np.arange(h) + 0.5) / h
    u, v = np.meshgrid(cols, rows)
    d_cam = np.stack([(u - intr.cx) / intr.fx,
                      (v - intr.cy) / intr.fy,
                      np.ones_like(u)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ extr.R  # (R^T @ d) for each pixel
    origin = extr.camera_center
    origins = np.broadcast_to(origin, (h, w, 3)).copy()
    return Rays(origins=origins, directions=d_world)


def flatten_conditioning(rig):
    """25-vector: 4x4 homogeneous [R|t] row-major, then 3x3 K row-major."""
    M = np.eye(4)
    M[:3, :4] = rig.extrinsics.Rt
    return np.concatenate([M.ravel(), rig.intrinsics.K.ravel()])


def unflatten_conditioning(vec, resolution):
    """Rebuild a CameraRig from the 25-d conditioning vector.

    K and [R|t] are recovered exactly; fov/azimuth/elevation/distance are
    re-derived from them (trig round trip, accurate to ~1e-12).
    """
    vec = np.asarray(vec, dtype=np.float64).reshape(25)
    M = vec[:16].reshape(4, 4)
    K = vec[16:].reshape(3, 3)
    extr = Extrinsics(R=M[:3, :3], t=M[:3, 3])
    fov_deg = math.degrees(2.0 * math.atan(0.5 / K[0, 0]))
    intr = Intrinsics(fov_deg=fov_deg, fx=K[0, 0], fy=K[1, 1], cx=K[0, 2], cy=K[1, 2])
    C = extr.camera_center
    distance = float(np.linalg.norm(C))
    elevation = math.asin(np.clip(C[1] / distance, -1.0, 1.0))
    azimuth = math.atan2(C[0], -C[2])
    return CameraRig(intrinsics=intr, extrinsics=extr, resolution=tuple(resolution),
                     azimuth=azimuth, elevation=elevation, distance=distance)
