"""Joint geometric augmentation and the paired-dataset composer."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .artifact import DEFAULT_BANK, PlaheParams, extract_artifact, inject_artifact, injection_range
from .osart import OsartConfig, osart_reconstruct, restore_hu
from .volcore import (
    AIR_HU, BACKGROUND, HU_MAX, HU_MIN, HU_SPAN, GridMismatchError, LabelVolume, Volume3,
    hu_to_unit01, relabel, sha256_file, write_volume,
)
from .xproj import ConeBeamGeometry, add_projection_noise, forward_project

log = logging.getLogger(__name__)

AFFINE_KINDS = ("identity", "scale_shear", "scale_rotate", "custom")


@dataclass(frozen=True)
class AffineSpec:
    """World-space transform about the volume centre.

    ``scale_shear``: isotropic scale then x' = x + tan(shear) * y (z untouched).
    ``scale_rotate``: isotropic scale then rotation about z.
    ``custom``: ``matrix`` is a 4x4 homogeneous matrix in centred world mm.
    """

    kind: str = "identity"
    scale: float = 1.0
    shear_deg: float = 0.0
    rotate_deg: float = 0.0
    matrix: tuple | None = None

    def __post_init__(self):
        if self.kind not in AFFINE_KINDS:
            raise ValueError(f"unknown affine kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if abs(self.shear_deg) >= 45:
            raise ValueError("|shear_deg| must be < 45")
        if self.kind == "custom":
            if self.matrix is None:
                raise ValueError("custom affine needs a 4x4 matrix")
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.shape != (4, 4):
                raise ValueError("custom affine matrix must be 4x4")
            object.__setattr__(self, "matrix", tuple(map(tuple, m.tolist())))

    def to_matrix(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(4)
        if self.kind == "custom":
            return np.asarray(self.matrix, dtype=np.float64)
        m = np.eye(4)
        if self.kind == "scale_shear":
            m[0, 1] = math.tan(math.radians(self.shear_deg))
        else:
            c, s = math.cos(math.radians(self.rotate_deg)), math.sin(math.radians(self.rotate_deg))
            m[:2, :2] = [[c, -s], [s, c]]
        m[:3, :3] *= self.scale
        return m

    def inverse(self) -> "AffineSpec":
        return AffineSpec("custom", matrix=tuple(map(tuple, np.linalg.inv(self.to_matrix()).tolist())))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "scale": self.scale, "shear_deg": self.shear_deg, "rotate_deg": self.rotate_deg}
        if self.matrix is not None:
            d["matrix"] = [list(r) for r in self.matrix]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AffineSpec":
        return cls(
            d.get("kind", "identity"),
            float(d.get("scale", 1.0)),
            float(d.get("shear_deg", 0.0)),
            float(d.get("rotate_deg", 0.0)),
            d.get("matrix"),
        )


# Identity plus the two augmentations named for the lung cohort.
DEFAULT_GEOMS = (
    AffineSpec("identity"),
    AffineSpec("scale_shear", scale=1.2, shear_deg=8.0),
    AffineSpec("scale_rotate", scale=0.8, rotate_deg=5.0),
)


def apply_affine(v: Volume3 | LabelVolume, a: AffineSpec):
    """Resample ``v`` so that the content moves by ``a`` (about the grid centre).

    Output voxel at centred world position x pulls from the input at
    ``A^-1 x``; trilinear for images (fill -1000 HU, or 0 for non-HU
    images), nearest for labels (fill 0). The grid is unchanged.
    """
    m = a.to_matrix()
    if abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise ValueError("affine matrix is singular")
    if a.kind == "identity" or np.array_equal(m, np.eye(4)):
        return v
    inv = np.linalg.inv(m)
    grid = v.grid
    spacing = np.asarray(grid.spacing)
    center_idx = 0.5 * (np.asarray(grid.dims) - 1)
    # index(x,y,z) -> centred world -> A^-1 -> index, then reorder to (z, y, x)
    lin_xyz = np.diag(1.0 / spacing) @ inv[:3, :3] @ np.diag(spacing)
    off_xyz = center_idx - lin_xyz @ center_idx + inv[:3, 3] / spacing
    perm = [2, 1, 0]
    lin = lin_xyz[np.ix_(perm, perm)]
    off = off_xyz[perm]
    if isinstance(v, LabelVolume):
        out = ndimage.affine_transform(v.labels, lin, off, order=0, mode="constant", cval=BACKGROUND)
        return LabelVolume(grid, out, v.scheme)
    fill = AIR_HU if v.unit == "HU" else 0.0
    out = ndimage.affine_transform(v.data.astype(np.float64), lin, off, order=1, mode="constant", cval=fill)
    return Volume3(grid, out.astype(v.data.dtype, copy=False), v.unit)


@dataclass(frozen=True)
class PipelineConfig:
    artifact_bank: tuple[PlaheParams, ...] = DEFAULT_BANK
    geoms: tuple[AffineSpec, ...] = DEFAULT_GEOMS
    geometry: ConeBeamGeometry = field(default_factory=ConeBeamGeometry)
    osart: OsartConfig = field(default_factory=OsartConfig)
    noise_sigma: float = 0.01
    seed: int = 0
    label_scheme: str = "eso4"

    def __post_init__(self):
        object.__setattr__(self, "artifact_bank", tuple(self.artifact_bank))
        object.__setattr__(self, "geoms", tuple(self.geoms))
        if not self.artifact_bank:
            raise ValueError("artifact_bank needs at least one setting")
        if not self.geoms:
            raise ValueError("geoms needs at least one transform")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.label_scheme not in ("eso1", "eso4"):
            raise ValueError(f"unknown label scheme {self.label_scheme!r}")

    def to_dict(self) -> dict:
        return {
            "artifact_bank": [p.to_dict() for p in self.artifact_bank],
            "geoms": [g.to_dict() for g in self.geoms],
            "geometry": self.geometry.to_dict(),
            "osart": self.osart.to_dict(),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "label_scheme": self.label_scheme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        kwargs = {}
        if "artifact_bank" in d:
            kwargs["artifact_bank"] = tuple(PlaheParams.from_dict(p) for p in d["artifact_bank"])
        if "geoms" in d:
            kwargs["geoms"] = tuple(AffineSpec.from_dict(g) for g in d["geoms"])
        if "geometry" in d:
            kwargs["geometry"] = ConeBeamGeometry.from_dict(d["geometry"])
        if "osart" in d:
            kwargs["osart"] = OsartConfig.from_dict(d["osart"])
        for key in ("noise_sigma", "seed", "label_scheme"):
            if key in d:
                kwargs[key] = d[key]
        return cls(**kwargs)


def sample_seed(seed: int, i: int, j: int) -> int:
    """Noise seed for artifact ``i`` x geometry ``j``: seed XOR the first
    eight bytes (little endian) of sha256("i,j"), kept to 63 bits."""
    digest = hashlib.sha256(f"{i},{j}".encode()).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "little")) & (2**63 - 1)


@dataclass
class DatasetManifest:
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.records, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        return cls(json.loads(Path(path).read_text()))


def _array_digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def compose_dataset(
    pct: Volume3,
    cbct: Volume3,
    labels: LabelVolume,
    cfg: PipelineConfig,
    outdir,
    stem: str = "case",
    inputs: dict | None = None,
) -> DatasetManifest:
    """Expand one registered (pCT, CBCT, labels) triple into
    ``len(cfg.artifact_bank) * len(cfg.geoms)`` paired samples.

    Per artifact setting i the CBCT artifact is extracted, injected into
    the pCT and projected once. Per geometry j the projections get their
    own noise draw (seeded by :func:`sample_seed`), are reconstructed with
    OS-SART and restored to HU; then transform j is applied jointly to
    pCT, psCBCT and labels. ``pct`` and ``cbct`` are in HU.
    """
    for name, vol in (("pct", pct), ("cbct", cbct)):
        if vol.unit != "HU":
            raise ValueError(f"{name} must be in HU, got {vol.unit}")
    if not (pct.grid == cbct.grid == labels.grid):
        raise GridMismatchError("pct, cbct and labels must share one grid")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    pct01 = hu_to_unit01(pct)
    cbct01 = hu_to_unit01(cbct)
    labels = relabel(labels, cfg.label_scheme)
    if inputs is None:
        inputs = {
            "pct": "sha256:" + _array_digest(pct.data),
            "cbct": "sha256:" + _array_digest(cbct.data),
            "labels": "sha256:" + _array_digest(labels.labels),
        }

    manifest = DatasetManifest()
    for i, params in enumerate(cfg.artifact_bank):
        log.info("artifact %d/%d: %s", i + 1, len(cfg.artifact_bank), params)
        art = extract_artifact(cbct01, params)
        lo01, hi01 = injection_range(pct01, art)
        hu_range = (lo01 * HU_SPAN + HU_MIN, hi01 * HU_SPAN + HU_MIN)
        if not hu_range[1] > hu_range[0]:
            raise ValueError("artifact-induced pCT is constant; nothing to reconstruct")
        clean = forward_project(inject_artifact(pct01, art), cfg.geometry)
        for j, geom in enumerate(cfg.geoms):
            seed = sample_seed(cfg.seed, i, j)
            noisy = add_projection_noise(clean, cfg.noise_sigma, seed)
            recon, report = osart_reconstruct(noisy, pct.grid, cfg.osart)
            log.info("  geom %d: OS-SART %.1fs, final residual %.4g", j, report.elapsed_s, report.residuals[-1])
            pscbct = restore_hu(recon, hu_range)
            pscbct = Volume3(pscbct.grid, np.clip(pscbct.data, HU_MIN, HU_MAX), "HU")

            names = {}
            hashes = {}
            for kind, vol in (
                ("pct", apply_affine(pct, geom)),
                ("pscbct", apply_affine(pscbct, geom)),
                ("labels", apply_affine(labels, geom)),
            ):
                base = outdir / f"{stem}_a{i}_g{j}_{kind}"
                written = write_volume(vol, base)
                names[kind] = base.name
                for path in written:
                    hashes[path.name] = sha256_file(path)
            manifest.records.append(
                {
                    "inputs": dict(inputs),
                    "plahe": params.to_dict(),
                    "affine": geom.to_dict(),
                    "noise_seed": seed,
                    "hu_range": list(hu_range),
                    "outputs": names,
                    "sha256": hashes,
                }
            )
    manifest.write(outdir / "manifest.json")
    return manifest
