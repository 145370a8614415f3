"""Power-law adaptive histogram equalisation and CBCT artifact transfer.

The local transform of a voxel ``x`` with window ``W(x)`` is

    g(x) = mean_{s in W(x)} q(f(x) - f(s))
    q(d) = beta * qa(d; alpha) + (1 - beta) * qa(d; 1)
    qa(d; a) = 1/2 + 1/2 * sign(d) * |d|**a

so ``qa(-1) = 0``, ``qa(0) = 1/2`` and ``qa(1) = 1``. ``alpha -> 0`` turns the
cumulation into a step function (local rank / histogram equalisation),
``alpha = 1`` into local mean subtraction. Windows are truncated at the
volume boundary and the average is taken over the voxels actually inside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy import ndimage

from . import _parallel  # noqa: F401
from .volcore import Volume3, check_same_grid


@dataclass(frozen=True)
class PlaheParams:
    alpha: float = 1.0
    beta: float = 1.0
    window: tuple[int, int, int] = (9, 9, 9)
    gain: float = 0.5

    def __post_init__(self):
        window = self.window
        if isinstance(window, int):
            window = (window,) * 3
        window = tuple(int(w) for w in window)
        object.__setattr__(self, "window", window)
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if len(window) != 3 or any(w < 1 or w % 2 == 0 for w in window):
            raise ValueError(f"window sizes must be three odd integers >= 1, got {window}")
        if not self.gain >= 0:
            raise ValueError(f"gain must be >= 0, got {self.gain}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "window": list(self.window), "gain": self.gain}

    @classmethod
    def from_dict(cls, d: dict) -> "PlaheParams":
        return cls(float(d["alpha"]), float(d["beta"]), d["window"], float(d.get("gain", 0.5)))


# High-frequency to smooth; window sizes are x, y, z voxels.
DEFAULT_BANK = (
    PlaheParams(1.0, 1.0, (9, 9, 9), 0.5),
    PlaheParams(0.7, 1.0, (9, 9, 9), 0.5),
    PlaheParams(0.5, 0.8, (15, 15, 15), 0.4),
    PlaheParams(0.3, 0.6, (21, 21, 21), 0.35),
    PlaheParams(0.2, 0.3, (31, 31, 31), 0.3),
)


@dataclass(frozen=True)
class ArtifactImage:
    """Zero-centred artifact-only field (unitless) and the parameters behind it."""

    base: Volume3
    params: PlaheParams


@njit(parallel=True, cache=True)
def _offset_term(f, oz, oy, ox, alpha, tmp):
    # tmp[x] = sign(d) |d|**alpha with d = f(x) - f(x + o), for x and x + o inside
    nz, ny, nx = f.shape
    for iz in prange(max(0, -oz), min(nz, nz - oz)):
        for iy in range(max(0, -oy), min(ny, ny - oy)):
            for ix in range(max(0, -ox), min(nx, nx - ox)):
                d = f[iz, iy, ix] - f[iz + oz, iy + oy, ix + ox]
                if d > 0.0:
                    tmp[iz, iy, ix] = math.pow(d, alpha)
                elif d < 0.0:
                    tmp[iz, iy, ix] = -math.pow(-d, alpha)
                else:
                    tmp[iz, iy, ix] = 0.0


@njit(parallel=True, cache=True)
def _accumulate_pair(tmp, oz, oy, ox, out):
    # offset +o contributes tmp[x]; offset -o contributes -tmp[x - o] (antisymmetry)
    nz, ny, nx = out.shape
    for iz in prange(nz):
        for iy in range(ny):
            for ix in range(nx):
                acc = 0.0
                if 0 <= iz + oz < nz and 0 <= iy + oy < ny and 0 <= ix + ox < nx:
                    acc += tmp[iz, iy, ix]
                if 0 <= iz - oz < nz and 0 <= iy - oy < ny and 0 <= ix - ox < nx:
                    acc -= tmp[iz - oz, iy - oy, ix - ox]
                out[iz, iy, ix] += acc


def _power_sum(f: np.ndarray, window, alpha: float) -> np.ndarray:
    """Sum of sign(d)|d|**alpha over each truncated window, d = f(x) - f(s).

    The summand is odd in d, so each offset pair (o, -o) needs one power
    evaluation per voxel pair.
    """
    hx, hy, hz = (w // 2 for w in window)
    out = np.zeros_like(f)
    tmp = np.zeros_like(f)
    for oz in range(0, hz + 1):
        for oy in range(-hy, hy + 1):
            if oz == 0 and oy < 0:
                continue
            for ox in range(-hx, hx + 1):
                if oz == 0 and oy == 0 and ox <= 0:
                    continue
                _offset_term(f, oz, oy, ox, alpha, tmp)
                _accumulate_pair(tmp, oz, oy, ox, out)
    return out


def _window_counts(shape, window) -> np.ndarray:
    # voxels inside each truncated window, as a separable product
    counts = []
    for n, w in zip(shape, window[::-1]):
        h = w // 2
        i = np.arange(n)
        counts.append((np.minimum(i + h, n - 1) - np.maximum(i - h, 0) + 1).astype(np.float64))
    return counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]


def box_mean(f: np.ndarray, window) -> np.ndarray:
    """Mean of ``f`` over each truncated window (``window`` in x, y, z order)."""
    size = tuple(window[::-1])
    total = ndimage.uniform_filter(f, size=size, mode="constant", cval=0.0) * float(np.prod(size))
    return total / _window_counts(f.shape, window)


def plahe(v: Volume3, p: PlaheParams) -> Volume3:
    """Power-law adaptive histogram equalisation of a [0, 1] volume."""
    f = np.asarray(v.data, dtype=np.float64)
    if f.size and (f.min() < 0.0 or f.max() > 1.0):
        raise ValueError("plahe expects volume values in [0, 1]")
    # differences are shift-invariant; centring on one voxel makes a
    # constant input give exactly zero
    centred = f - f.flat[0] if f.size else f
    linear = centred - box_mean(centred, p.window)
    if p.alpha == 1.0 or p.beta == 0.0:
        # qa(d; 1) = 1/2 + d/2 for both terms
        g = 0.5 + 0.5 * linear
    else:
        power = _power_sum(np.ascontiguousarray(f), p.window, float(p.alpha))
        power /= _window_counts(f.shape, p.window)
        g = 0.5 + 0.5 * (p.beta * power + (1.0 - p.beta) * linear)
    return Volume3(v.grid, np.clip(g, 0.0, 1.0), "normalized01")


def extract_artifact(cbct: Volume3, p: PlaheParams) -> ArtifactImage:
    """Artifact-only field ``gain * (plahe(cbct) - 1/2)``."""
    g = plahe(cbct, p)
    return ArtifactImage(Volume3(cbct.grid, p.gain * (g.data - 0.5), "unitless"), p)


def injection_range(pct: Volume3, a: ArtifactImage) -> tuple[float, float]:
    """(min, max) of ``pct + artifact`` before rescaling."""
    check_same_grid(pct, a.base)
    raw = pct.data.astype(np.float64) + a.base.data
    return float(raw.min()), float(raw.max())


def inject_artifact(pct: Volume3, a: ArtifactImage) -> Volume3:
    """Add the artifact to ``pct`` and min-max rescale the sum to [0, 1].

    A constant sum has no range to rescale and maps to all zeros.
    """
    check_same_grid(pct, a.base)
    raw = pct.data.astype(np.float64) + a.base.data
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        out = (raw - lo) / (hi - lo)
    else:
        out = np.zeros_like(raw)
    return Volume3(pct.grid, out, "normalized01")
