"""Ray marching over pluggable density fields.

Depth is the discrete expected-ray-length sum over samples t_i:
    depth = sum_i t_i * sigma_i * T_i * dt_i,
    T_i   = exp(-sum_{j<i} sigma_j * dt_j).
Expected ray length is converted to camera-space z by the ray direction's
z-component so it compares directly with rasterized depth.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from . import camera as cam_mod
from .raster import DepthMap


class UnsupportedCapabilityError(RuntimeError):
    """Raised when a field is asked for radiance it does not provide."""


class DensityField(abc.ABC):
    """Nonnegative density sigma(x), optional radiance, and a bounding box."""

    @abc.abstractmethod
    def sigma(self, points):
        """Density at each point; points (N,3) -> (N,)."""

    @property
    @abc.abstractmethod
    def bbox(self):
        """(min_xyz, max_xyz) arrays."""

    @property
    def has_radiance(self):
        return False

    def radiance(self, points, directions):
        raise UnsupportedCapabilityError(f"{type(self).__name__} has no radiance")


class CallableField(DensityField):
    """Wrap sigma (and optionally radiance) callables with a bounding box."""

    def __init__(self, sigma_fn, bbox, radiance_fn=None):
        self._sigma_fn = sigma_fn
        self._bbox = (np.asarray(bbox[0], dtype=np.float64),
                      np.asarray(bbox[1], dtype=np.float64))
        self._radiance_fn = radiance_fn

    def sigma(self, points):
        return np.asarray(self._sigma_fn(np.atleast_2d(points)), dtype=np.float64)

    @property
    def bbox(self):
        return self._bbox

    @property
    def has_radiance(self):
        return self._radiance_fn is not None

    def radiance(self, points, directions):
        if self._radiance_fn is None:
            return super().radiance(points, directions)
        return np.asarray(self._radiance_fn(np.atleast_2d(points),
                                            np.atleast_2d(directions)))


class EmptyField(DensityField):
    def __init__(self, bbox=((-1, -1, -1), (1, 1, 1))):
        self._bbox = (np.asarray(bbox[0], float), np.asarray(bbox[1], float))

    def sigma(self, points):
        return np.zeros(len(np.atleast_2d(points)))

    @property
    def bbox(self):
        return self._bbox


class SphereField(DensityField):
    """Constant density inside a sphere; handy analytic test field."""

    def __init__(self, center, radius, sigma0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.sigma0 = float(sigma0)

    def sigma(self, points):
        d = np.linalg.norm(np.atleast_2d(points) - self.center, axis=1)
        return np.where(d <= self.radius, self.sigma0, 0.0)

    @property
    def bbox(self):
        r = self.radius
        return (self.center - r, self.center + r)


class VoxelGrid(DensityField):
    """Trilinearly interpolated density grid; zero outside the box."""

    def __init__(self, dims, bbox_min, bbox_max, values):
        self.dims = tuple(int(d) for d in dims)
        nx, ny, nz = self.dims
        if min(self.dims) < 2:
            raise ValueError("voxel grid needs at least 2 samples per axis")
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)
        vals = np.asarray(values, dtype=np.float32).reshape(nz, ny, nx)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("voxel values must be finite and nonnegative")
        self.values = vals  # indexed [iz, iy, ix]

    def sigma(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nx, ny, nz = self.dims
        span = self.bbox_max - self.bbox_min
        # lattice coordinates: node i at bbox_min + i/(n-1)*span
        g = (pts - self.bbox_min) / span * (np.array(self.dims) - 1)
        inside = np.all((pts >= self.bbox_min) & (pts <= self.bbox_max), axis=1)
        g = np.clip(g, 0, np.array(self.dims) - 1)
        i0 = np.minimum(g.astype(np.int64), np.array(self.dims) - 2)
        f = g - i0
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        v = self.values
        c000 = v[iz, iy, ix]
        c100 = v[iz, iy, ix + 1]
        c010 = v[iz, iy + 1, ix]
        c110 = v[iz, iy + 1, ix + 1]
        c001 = v[iz + 1, iy, ix]
        c101 = v[iz + 1, iy, ix + 1]
        c011 = v[iz + 1, iy + 1, ix]
        c111 = v[iz + 1, iy + 1, ix + 1]
        c00 = c000 * (1 - fx) + c100 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out = c0 * (1 - fz) + c1 * fz
        return np.where(inside, out, 0.0)

    @property
    def bbox(self):
        return (self.bbox_min, self.bbox_max)

    @classmethod
    def from_field(cls, field, dims, bbox_min=None, bbox_max=None):
        bmin = np.asarray(bbox_min if bbox_min is not None else field.bbox[0], float)
        bmax = np.asarray(bbox_max if bbox_max is not None else field.bbox[1], float)
        nx, ny, nz = (int(d) for d in dims)
        xs = np.linspace(bmin[0], bmax[0], nx)
        ys = np.linspace(bmin[1], bmax[1], ny)
        zs = np.linspace(bmin[2], bmax[2], nz)
        Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        vals = field.sigma(pts).reshape(nz, ny, nx)
        return cls((nx, ny, nz), bmin, bmax, vals)

    def save(self, path):
        from .io_formats import write_dvox
        write_dvox(path, self.dims, self.bbox_min, self.bbox_max, self.values)

    @classmethod
    def load(cls, path):
        from .io_formats import read_dvox
        dims, bmin, bmax, values = read_dvox(path)
        return cls(dims, bmin, bmax, values)


@dataclass(frozen=True)
class MarchConfig:
    t_near: float = 1.7
    t_far: float = 3.7
    n_samples: int = 256
    stratified: bool = False
    tau_opaque: float = 0.5

    def __post_init__(self):
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples")
        if not (0 <= self.tau_opaque < 1):
            raise ValueError("tau_opaque must be in [0, 1)")

    def sample_distances(self, rng=None):
        """Midpoint sample distances; stratified jitter when configured."""
        n = self.n_samples
        dt = (self.t_far - self.t_near) / n
        offsets = np.full(n, 0.5)
        if self.stratified:
            if rng is None:
                raise ValueError("stratified sampling needs an rng")
            offsets = rng.random(n)
        t = self.t_near + (np.arange(n) + offsets) * dt
        return t, np.full(n, dt)


def transmittance(densities, deltas):
    """T_i = exp(-sum_{j<i} sigma_j * dt_j) along the last axis; T_1 = 1."""
    sig = np.asarray(densities, dtype=np.float64)
    dts = np.asarray(deltas, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError("densities must be nonnegative")
    if np.any(dts <= 0):
        raise ValueError("deltas must be positive")
    acc = np.cumsum(sig * dts, axis=-1)
    shifted = np.zeros_like(acc)
    shifted[..., 1:] = acc[..., :-1]
    return np.exp(-shifted)


def _march_sigma(field, origins, directions, t, chunk_target=2_000_000):
    """Evaluate sigma at o + t_i*d for every ray; returns (R, N)."""
    o = origins.reshape(-1, 3)
    d = directions.reshape(-1, 3)
    n = len(t)
    rays_per_chunk = max(1, chunk_target // n)
    out = np.empty((len(o), n))
    for s in range(0, len(o), rays_per_chunk):
        e = min(s + rays_per_chunk, len(o))
        pts = o[s:e, None, :] + t[None, :, None] * d[s:e, None, :]
        out[s:e] = field.sigma(pts.reshape(-1, 3)).reshape(e - s, n)
    return out


def _integrate(sig, t, dt):
    # T_i * (1 - exp(-sigma_i * dt_i)) is the exact per-cell absorbed mass for
    # piecewise-constant density and tends to sigma_i * T_i * dt_i as dt -> 0;
    # the naive product diverges once sigma*dt is no longer small.
    T = transmittance(sig, dt)
    weights = T * (1.0 - np.exp(-sig * dt))
    depth = np.sum(t * weights, axis=-1)
    opacity = 1.0 - np.exp(-np.sum(sig * dt, axis=-1))
    return depth, opacity


def quadrature_depth(field, origin, direction, cfg, rng=None):
    """Expected ray length and opacity for a single ray."""
    t, dt = cfg.sample_distances(rng)
    sig = _march_sigma(field, np.asarray(origin, float)[None, :],
                       np.asarray(direction, float)[None, :], t)
    depth, opacity = _integrate(sig, t, dt)
    return float(depth[0]), float(opacity[0])


def render_depth_map(field, rig, cfg, rng=None):
    """March every pixel ray; camera-space z DepthMap, background by opacity."""
    rays = cam_mod.generate_rays(rig)
    t, dt = cfg.sample_distances(rng)
    sig = _march_sigma(field, rays.origins, rays.directions, t)
    length, opacity = _integrate(sig, t, dt)
    w, h = rig.resolution
    length = length.reshape(h, w)
    opacity = opacity.reshape(h, w)
    dz = rays.directions.reshape(-1, 3) @ rig.extrinsics.R[2]  # camera-frame z
    z = length * dz.reshape(h, w)
    valid = opacity >= cfg.tau_opaque
    return DepthMap(values=np.where(valid, z, 0.0), valid=valid)


def extract_level_set(field, rig, cfg, alpha, mode="first-hit", rng=None):
    """World-space points where the marched density reaches `alpha`.

    `first-hit` keeps the first qualifying sample per ray (surface-like
    cloud); `all-hits` keeps every qualifying sample.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if mode not in ("first-hit", "all-hits"):
        raise ValueError(f"unknown level-set mode {mode!r}")
    rays = cam_mod.generate_rays(rig)
    t, _ = cfg.sample_distances(rng)
    o = rays.origins.reshape(-1, 3)
    d = rays.directions.reshape(-1, 3)
    sig = _march_sigma(field, o, d, t)
    qual = sig >= alpha
    if mode == "all-hits":
        ray_i, samp_i = np.nonzero(qual)
        return o[ray_i] + t[samp_i, None] * d[ray_i]
    any_hit = qual.any(axis=1)
    first = np.argmax(qual, axis=1)
    ray_i = np.nonzero(any_hit)[0]
    return o[ray_i] + t[first[ray_i], None] * d[ray_i]


def render_rgb(field, rig, cfg, rng=None, background=1.0):
    """Emission-absorption compositing; requires a radiance-capable field."""
    if not field.has_radiance:
        raise UnsupportedCapabilityError("field supplies no radiance")
    rays = cam_mod.generate_rays(rig)
    t, dt = cfg.sample_distances(rng)
    o = rays.origins.reshape(-1, 3)
    d = rays.directions.reshape(-1, 3)
    w, h = rig.resolution
    img = np.empty((len(o), 3))
    chunk = max(1, 500_000 // len(t))
    for s in range(0, len(o), chunk):
        e = min(s + chunk, len(o))
        pts = o[s:e, None, :] + t[None, :, None] * d[s:e, None, :]
        flat = pts.reshape(-1, 3)
        dirs = np.repeat(d[s:e], len(t), axis=0)
        sig = field.sigma(flat).reshape(e - s, len(t))
        col = field.radiance(flat, dirs).reshape(e - s, len(t), 3)
        T = transmittance(sig, dt)
        alpha = 1.0 - np.exp(-sig * dt)
        weights = T * alpha
        rgb = np.sum(weights[..., None] * col, axis=1)
        residual = np.exp(-np.sum(sig * dt, axis=-1))
        img[s:e] = rgb + residual[:, None] * background
    return np.clip(img.reshape(h, w, 3), 0.0, 1.0)
