"""Expand one registered (pCT, CBCT, labels) triple into a paired
training set: artifacts x geometric transforms, written as VOL1 files
with a manifest.

    python demos/03_compose_dataset.py [outdir]
"""
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from cbct_forge import (
    DEFAULT_BANK, DEFAULT_GEOMS, ConeBeamGeometry, Grid3, LabelVolume, OsartConfig, PipelineConfig, Volume3,
    compose_dataset, read_volume,
)

outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cbct_forge_"))

n = 32
c = np.arange(n) - (n - 1) / 2
z, y, x = np.meshgrid(c, c, c, indexing="ij")
grid = Grid3((n, n, n), (1.5, 1.5, 1.5), tuple(-1.5 * (n - 1) / 2 for _ in range(3)))
body = (x / 14) ** 2 + (y / 11) ** 2 + (z / 14) ** 2 <= 1
lung = ((x - 6) / 4) ** 2 + (y / 5) ** 2 + (z / 7) ** 2 <= 1
heart = ((x + 4) / 4) ** 2 + ((y - 2) / 4) ** 2 + (z / 4) ** 2 <= 1
cord = ((x / 1.5) ** 2 + ((y + 8) / 1.5) ** 2 <= 1) & body

pct = np.where(body, 40.0, -1000.0)
pct[lung], pct[heart], pct[cord] = -800.0, 50.0, 30.0
rng = np.random.default_rng(0)
cbct = np.clip(pct + 90 * np.sin(x / 1.7) * body + rng.normal(0, 40, pct.shape), -1000, 3095)
labels = np.zeros(pct.shape, dtype=np.uint8)
labels[lung], labels[heart], labels[cord] = 1, 2, 3

cfg = PipelineConfig(
    artifact_bank=DEFAULT_BANK[:3],
    geoms=DEFAULT_GEOMS,
    geometry=ConeBeamGeometry(det_dims=(48, 48), det_spacing=(2.0, 2.0), n_views=36),
    osart=OsartConfig(n_subsets=6, n_iterations=6),
    seed=11,
)
manifest = compose_dataset(Volume3(grid, pct, "HU"), Volume3(grid, cbct, "HU"),
                           LabelVolume(grid, labels, "eso4"), cfg, outdir, stem="demo")

print(f"{len(manifest)} paired samples in {outdir}")
for r in manifest.records:
    ps = read_volume(outdir / r["outputs"]["pscbct"])
    ct = read_volume(outdir / r["outputs"]["pct"])
    gap = np.abs(ps.data - ct.data).mean()
    print(f"  {r['outputs']['pscbct']:22s} {r['affine']['kind']:12s} noise seed {r['noise_seed']:>20d}"
          f"  |psCBCT - pCT| {gap:6.1f} HU")
print(json.dumps(manifest.records[0]["sha256"], indent=2)[:300], "...")
