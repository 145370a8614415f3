"""Voxel-driven back projection and ordered-subset SART reconstruction."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import _parallel  # noqa: F401
from .volcore import Grid3, Volume3
from .xproj import ConeBeamGeometry, ProjectionStack, _check_geometry, project_array

ZERO_GUARD = 1e-8


@dataclass(frozen=True)
class OsartConfig:
    n_subsets: int = 10
    n_iterations: int = 20
    relax: float = 0.5
    nonneg: bool = True
    init: float | str = "zeros"

    def __post_init__(self):
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not 0 < self.relax < 2:
            raise ValueError("relax must lie in (0, 2)")
        if self.init != "zeros" and not isinstance(self.init, (int, float)):
            raise ValueError("init must be 'zeros' or a constant value")

    @property
    def init_value(self) -> float:
        return 0.0 if self.init == "zeros" else float(self.init)

    def to_dict(self) -> dict:
        return {
            "n_subsets": self.n_subsets,
            "n_iterations": self.n_iterations,
            "relax": self.relax,
            "nonneg": self.nonneg,
            "init": self.init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OsartConfig":
        init = d.get("init", "zeros")
        if isinstance(init, dict):
            init = float(init["constant"])
        return cls(
            n_subsets=int(d.get("n_subsets", 10)),
            n_iterations=int(d.get("n_iterations", 20)),
            relax=float(d.get("relax", 0.5)),
            nonneg=bool(d.get("nonneg", True)),
            init=init,
        )


@dataclass
class ReconReport:
    residuals: list[float] = field(default_factory=list)
    elapsed_s: float = 0.0

    def to_dict(self) -> dict:
        return {"residuals": list(self.residuals), "elapsed_s": self.elapsed_s}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@njit(inline="always", cache=True)
def _pixel(img, iv, iu):
    nv, nu = img.shape
    if iu < 0 or iv < 0 or iu >= nu or iv >= nv:
        return 0.0
    return img[iv, iu]


@njit(cache=True)
def _bilinear(img, fu, fv):
    nv, nu = img.shape
    if fu <= -1.0 or fv <= -1.0 or fu >= nu or fv >= nv:
        return 0.0
    u0 = math.floor(fu)
    v0 = math.floor(fv)
    au = fu - u0
    av = fv - v0
    iu = int(u0)
    iv = int(v0)
    p00 = _pixel(img, iv, iu)
    p01 = _pixel(img, iv, iu + 1)
    p10 = _pixel(img, iv + 1, iu)
    p11 = _pixel(img, iv + 1, iu + 1)
    return (1.0 - av) * ((1.0 - au) * p00 + au * p01) + av * ((1.0 - au) * p10 + au * p11)


@njit(parallel=True, cache=True)
def _back_kernel(proj, cos_a, sin_a, sad, sdd, du, dv, sx, sy, sz, out):
    n_views, nv, nu = proj.shape
    nz, ny, nx = out.shape
    cx = 0.5 * (nx - 1)
    cy = 0.5 * (ny - 1)
    cz = 0.5 * (nz - 1)
    # rays per unit area at magnification M is M^2 / (du dv); a voxel's tent
    # kernel integrates to its volume
    density = sx * sy * sz / (du * dv)
    for iz in prange(nz):
        z = (iz - cz) * sz
        for iy in range(ny):
            y = (iy - cy) * sy
            for ix in range(nx):
                x = (ix - cx) * sx
                acc = 0.0
                for a in range(n_views):
                    c = cos_a[a]
                    s = sin_a[a]
                    dist = sad - (x * c + y * s)
                    if dist <= 0.0:
                        continue
                    mag = sdd / dist
                    u = mag * (y * c - x * s)
                    v = mag * z
                    val = _bilinear(proj[a], u / du + 0.5 * (nu - 1), v / dv + 0.5 * (nv - 1))
                    if val != 0.0:
                        obliquity = math.sqrt(sdd * sdd + u * u + v * v) / sdd
                        acc += val * mag * mag * density * obliquity
                out[iz, iy, ix] = acc


def backproject_array(proj: np.ndarray, grid: Grid3, geo: ConeBeamGeometry, angles: np.ndarray) -> np.ndarray:
    du, dv = geo.det_spacing
    sx, sy, sz = grid.spacing
    angles = np.asarray(angles, dtype=np.float64)
    out = np.empty(grid.shape, dtype=np.float64)
    _back_kernel(
        np.ascontiguousarray(proj, dtype=np.float64), np.cos(angles), np.sin(angles),
        float(geo.sad), float(geo.sdd), float(du), float(dv), float(sx), float(sy), float(sz), out,
    )
    return out


def back_project(p: ProjectionStack, target: Grid3) -> Volume3:
    """Voxel-driven adjoint of :func:`forward_project`.

    Every voxel centre is projected onto each detector, the detector is
    sampled bilinearly there and the samples are summed with the ray-density
    weight ``M^2 * voxel_volume / (du * dv) / cos(ray angle)``.
    """
    if p.geometry.n_views == 0 or p.data.shape[0] == 0:
        raise ValueError("back_project needs at least one view")
    _check_geometry(target, p.geometry)
    out = backproject_array(p.data, target, p.geometry, p.geometry.view_angles)
    return Volume3(target, out, "unitless")


def _reciprocal(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    mask = a >= ZERO_GUARD
    out[mask] = 1.0 / a[mask]
    return out


def subsets_for(n_views: int, n_subsets: int) -> list[np.ndarray]:
    """Round-robin subsets: view i goes to subset i mod n_subsets."""
    n = min(n_subsets, n_views)
    return [np.arange(k, n_views, n) for k in range(n)]


def osart_reconstruct(
    p: ProjectionStack, target: Grid3, cfg: OsartConfig = OsartConfig(), x0: Volume3 | None = None
) -> tuple[Volume3, ReconReport]:
    """Reconstruct a [0, 1] volume on ``target`` from ``p``.

    ``x0`` (on ``target``) replaces the configured constant start.

    For each subset S in turn::

        x <- x + relax * V_S * A_S^T (W_S * (b_S - A_S x))

    with W_S = 1 / A_S 1 (ray lengths) and V_S = 1 / A_S^T 1 (voxel
    sensitivities), both zero-guarded. ``nonneg`` clamps negatives after
    every update; the returned volume is clamped to [0, 1].
    """
    _check_geometry(target, p.geometry)
    start = time.perf_counter()
    geo = p.geometry.resolved(target)
    angles = geo.view_angles
    b = p.data.astype(np.float64)
    subsets = subsets_for(geo.n_views, cfg.n_subsets)

    ones_vol = np.ones(target.shape)
    weights = []
    for views in subsets:
        row = _reciprocal(project_array(ones_vol, target, geo, angles[views]))
        col = _reciprocal(backproject_array(np.ones((len(views),) + b.shape[1:]), target, geo, angles[views]))
        weights.append((row, col))
    if not any(np.any(col > 0) for _, col in weights):
        raise ValueError("no voxel of the target grid is seen by any projection")

    if x0 is None:
        x = np.full(target.shape, cfg.init_value, dtype=np.float64)
    else:
        if x0.grid != target:
            raise ValueError("x0 must live on the target grid")
        x = np.array(x0.data, dtype=np.float64)
    report = ReconReport()
    for _ in range(cfg.n_iterations):
        for views, (row, col) in zip(subsets, weights):
            resid = b[views] - project_array(x, target, geo, angles[views])
            report.residuals.append(float(np.sqrt(np.sum(resid * resid))))
            x += cfg.relax * col * backproject_array(row * resid, target, geo, angles[views])
            if cfg.nonneg:
                np.maximum(x, 0.0, out=x)
    np.clip(x, 0.0, 1.0, out=x)
    report.elapsed_s = time.perf_counter() - start
    return Volume3(target, x, "normalized01"), report


def restore_hu(recon: Volume3, reference_range: tuple[float, float]) -> Volume3:
    """Affine map of a [0, 1] reconstruction onto ``(lo, hi)`` HU."""
    lo, hi = (float(v) for v in reference_range)
    if not lo < hi:
        raise ValueError(f"invalid HU range ({lo}, {hi})")
    return Volume3(recon.grid, lo + recon.data.astype(np.float64) * (hi - lo), "HU")
