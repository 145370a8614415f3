"""Cone-beam forward projection on a circular source trajectory.

Frame: the rotation axis is the volume z axis through the grid centre
(isocentre). For view angle ``a`` the source sits at
``sad * (cos a, sin a, 0)``, the flat detector is centred at
``-(sdd - sad) * (cos a, sin a, 0)`` with its u axis along
``(-sin a, cos a, 0)`` and its v axis along +z.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import _parallel  # noqa: F401  (threading layer selection)
from .volcore import Grid3, Volume3


@dataclass(frozen=True)
class ConeBeamGeometry:
    sad: float = 1000.0
    sdd: float = 1500.0
    det_dims: tuple[int, int] = (256, 256)
    det_spacing: tuple[float, float] = (2.0, 2.0)
    n_views: int = 360
    angles: tuple[float, ...] | None = None
    step_mm: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "det_dims", tuple(int(d) for d in self.det_dims))
        object.__setattr__(self, "det_spacing", tuple(float(d) for d in self.det_spacing))
        if self.angles is not None:
            angles = tuple(float(a) for a in self.angles)
            object.__setattr__(self, "angles", angles)
            object.__setattr__(self, "n_views", len(angles))
        if not 0 < self.sad < self.sdd:
            raise ValueError(f"degenerate geometry: need 0 < sad < sdd, got sad={self.sad}, sdd={self.sdd}")
        if len(self.det_dims) != 2 or min(self.det_dims) < 1:
            raise ValueError(f"detector dims must be two values >= 1, got {self.det_dims}")
        if len(self.det_spacing) != 2 or not min(self.det_spacing) > 0:
            raise ValueError(f"detector spacing must be two values > 0, got {self.det_spacing}")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.step_mm is not None and not self.step_mm > 0:
            raise ValueError("step_mm must be > 0")

    @property
    def view_angles(self) -> np.ndarray:
        if self.angles is not None:
            return np.asarray(self.angles, dtype=np.float64)
        return np.arange(self.n_views) * (2.0 * np.pi / self.n_views)

    @property
    def magnification(self) -> float:
        return self.sdd / self.sad

    def resolved(self, grid: Grid3) -> "ConeBeamGeometry":
        """Copy with ``step_mm`` filled in (half the smallest voxel spacing)."""
        if self.step_mm is not None:
            return self
        return replace(self, step_mm=0.5 * min(grid.spacing))

    def to_dict(self) -> dict:
        return {
            "sad": self.sad,
            "sdd": self.sdd,
            "det_dims": list(self.det_dims),
            "det_spacing": list(self.det_spacing),
            "n_views": self.n_views,
            "angles": None if self.angles is None else list(self.angles),
            "step_mm": self.step_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        known = {k: d[k] for k in ("sad", "sdd", "det_dims", "det_spacing", "n_views", "angles", "step_mm") if k in d}
        return cls(**known)


@dataclass(frozen=True)
class ProjectionStack:
    """Line-integral images, ``data`` shaped ``(n_views, v, u)``."""

    geometry: ConeBeamGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        nu, nv = self.geometry.det_dims
        if data.shape != (self.geometry.n_views, nv, nu):
            raise ValueError(f"projection data shape {data.shape} does not match geometry {(self.geometry.n_views, nv, nu)}")
        if not np.all(np.isfinite(data)):
            raise ValueError("projection data must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def subset(self, views) -> "ProjectionStack":
        views = np.asarray(views, dtype=np.intp)
        angles = self.geometry.view_angles[views]
        geo = replace(self.geometry, angles=tuple(angles), n_views=len(angles))
        return ProjectionStack(geo, self.data[views])


def _proj_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".proj.json", ".proj.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".proj.json"), p.with_name(name + ".proj.raw")


def write_projections(p: ProjectionStack, path) -> tuple[Path, Path]:
    header_path, raw_path = _proj_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(p.data.astype("<f4").tobytes())
    header = {**p.geometry.to_dict(), "dtype": "f32le", "order": "view-major, v then u"}
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path, raw_path


def read_projections(path) -> ProjectionStack:
    header_path, raw_path = _proj_paths(path)
    header = json.loads(header_path.read_text())
    geo = ConeBeamGeometry.from_dict(header)
    nu, nv = geo.det_dims
    payload = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    if payload.size != geo.n_views * nu * nv:
        raise ValueError(f"{raw_path}: expected {geo.n_views * nu * nv} values, found {payload.size}")
    return ProjectionStack(geo, payload.reshape(geo.n_views, nv, nu))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(inline="always", cache=True)
def _voxel(vol, iz, iy, ix):
    nz, ny, nx = vol.shape
    if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
        return 0.0
    return vol[iz, iy, ix]


@njit(cache=True)
def _trilinear(vol, x, y, z):
    nz, ny, nx = vol.shape
    if x <= -1.0 or y <= -1.0 or z <= -1.0 or x >= nx or y >= ny or z >= nz:
        return 0.0
    x0 = math.floor(x)
    y0 = math.floor(y)
    z0 = math.floor(z)
    fx = x - x0
    fy = y - y0
    fz = z - z0
    ix = int(x0)
    iy = int(y0)
    iz = int(z0)
    if ix >= 0 and iy >= 0 and iz >= 0 and ix + 1 < nx and iy + 1 < ny and iz + 1 < nz:
        c000 = vol[iz, iy, ix]
        c001 = vol[iz, iy, ix + 1]
        c010 = vol[iz, iy + 1, ix]
        c011 = vol[iz, iy + 1, ix + 1]
        c100 = vol[iz + 1, iy, ix]
        c101 = vol[iz + 1, iy, ix + 1]
        c110 = vol[iz + 1, iy + 1, ix]
        c111 = vol[iz + 1, iy + 1, ix + 1]
    else:
        c000 = _voxel(vol, iz, iy, ix)
        c001 = _voxel(vol, iz, iy, ix + 1)
        c010 = _voxel(vol, iz, iy + 1, ix)
        c011 = _voxel(vol, iz, iy + 1, ix + 1)
        c100 = _voxel(vol, iz + 1, iy, ix)
        c101 = _voxel(vol, iz + 1, iy, ix + 1)
        c110 = _voxel(vol, iz + 1, iy + 1, ix)
        c111 = _voxel(vol, iz + 1, iy + 1, ix + 1)
    c00 = c000 + fx * (c001 - c000)
    c01 = c010 + fx * (c011 - c010)
    c10 = c100 + fx * (c101 - c100)
    c11 = c110 + fx * (c111 - c110)
    c0 = c00 + fy * (c01 - c00)
    c1 = c10 + fy * (c11 - c10)
    return c0 + fz * (c1 - c0)


@njit(cache=True)
def _slab(o, d, h, tmin, tmax):
    if abs(d) < 1e-12:
        if o < -h or o > h:
            return 1.0, 0.0
        return tmin, tmax
    t1 = (-h - o) / d
    t2 = (h - o) / d
    if t1 > t2:
        t1, t2 = t2, t1
    return max(tmin, t1), min(tmax, t2)


@njit(parallel=True, cache=True)
def _forward_kernel(vol, cos_a, sin_a, sad, sdd, nu, nv, du, dv, sx, sy, sz, step, out):
    nz, ny, nx = vol.shape
    cx = 0.5 * (nx - 1)
    cy = 0.5 * (ny - 1)
    cz = 0.5 * (nz - 1)
    # support box of the zero-padded trilinear field: index range [-1, n]
    hx = 0.5 * (nx + 1) * sx
    hy = 0.5 * (ny + 1) * sy
    hz = 0.5 * (nz + 1) * sz
    n_rows = cos_a.shape[0] * nv
    for row in prange(n_rows):
        a = row // nv
        iv = row - a * nv
        c = cos_a[a]
        s = sin_a[a]
        srcx = sad * c
        srcy = sad * s
        v = (iv - 0.5 * (nv - 1)) * dv
        for iu in range(nu):
            u = (iu - 0.5 * (nu - 1)) * du
            dx = -(sdd - sad) * c - u * s - srcx
            dy = -(sdd - sad) * s + u * c - srcy
            dz = v
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= norm
            dy /= norm
            dz /= norm
            t0, t1 = _slab(srcx, dx, hx, -1e300, 1e300)
            t0, t1 = _slab(srcy, dy, hy, t0, t1)
            t0, t1 = _slab(0.0, dz, hz, t0, t1)
            acc = 0.0
            if t1 > t0:
                n = int(math.ceil((t1 - t0) / step))
                for k in range(n):
                    t = t0 + (k + 0.5) * step
                    acc += _trilinear(
                        vol, (srcx + t * dx) / sx + cx, (srcy + t * dy) / sy + cy, (t * dz) / sz + cz
                    )
            out[a, iv, iu] = acc * step


def _check_geometry(grid: Grid3, geo: ConeBeamGeometry):
    half = 0.5 * (np.asarray(grid.dims) + 1) * np.asarray(grid.spacing)
    if math.hypot(half[0], half[1]) >= geo.sad:
        raise ValueError("volume extends past the source trajectory (sad too small for this grid)")


def project_array(vol: np.ndarray, grid: Grid3, geo: ConeBeamGeometry, angles: np.ndarray | None = None) -> np.ndarray:
    """Ray-driven projection of a raw ``(nz, ny, nx)`` array; float64 output."""
    geo = geo.resolved(grid)
    angles = geo.view_angles if angles is None else np.asarray(angles, dtype=np.float64)
    nu, nv = geo.det_dims
    du, dv = geo.det_spacing
    sx, sy, sz = grid.spacing
    out = np.empty((len(angles), nv, nu), dtype=np.float64)
    _forward_kernel(
        np.ascontiguousarray(vol), np.cos(angles), np.sin(angles),
        float(geo.sad), float(geo.sdd), nu, nv, float(du), float(dv),
        float(sx), float(sy), float(sz), float(geo.step_mm), out,
    )
    return out


def forward_project(v: Volume3, g: ConeBeamGeometry) -> ProjectionStack:
    """Line integrals of ``v`` along every source-to-bin ray.

    Each ray is sampled at the midpoints of ``step_mm`` intervals across the
    volume's support, the samples are trilinearly interpolated (zero outside
    the volume) and the sum is scaled by ``step_mm``.
    """
    data = v.data
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("forward_project expects volume values in [0, 1]")
    _check_geometry(v.grid, g)
    geo = g.resolved(v.grid)
    return ProjectionStack(geo, project_array(data, v.grid, geo).astype(np.float32))


def add_projection_noise(p: ProjectionStack, sigma: float, seed: int) -> ProjectionStack:
    """Add i.i.d. N(0, (sigma * max(p))^2) noise, reproducible from ``seed``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return p
    rng = np.random.default_rng(seed)
    scale = sigma * float(p.data.max())
    noisy = p.data.astype(np.float64) + rng.normal(0.0, scale, size=p.data.shape)
    return ProjectionStack(p.geometry, noisy)
