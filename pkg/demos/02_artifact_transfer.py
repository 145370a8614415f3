"""Pull scatter/streak texture out of a CBCT with PL-AHE and transfer it
onto a clean planning CT.

    python demos/02_artifact_transfer.py
"""
import numpy as np

from cbct_forge import DEFAULT_BANK, Grid3, Volume3, extract_artifact, hu_to_unit01, inject_artifact, injection_range
from cbct_forge.volcore import HU_MIN, HU_SPAN

n = 40
c = np.arange(n) - (n - 1) / 2
z, y, x = np.meshgrid(c, c, c, indexing="ij")
grid = Grid3((n, n, n), (1.0, 1.0, 1.0), tuple(-(n - 1) / 2 for _ in range(3)))
body = (x / 17) ** 2 + (y / 13) ** 2 + (z / 18) ** 2 <= 1

pct = np.where(body, 40.0, -1000.0)
pct[((x - 6) / 5) ** 2 + (y / 7) ** 2 + (z / 9) ** 2 <= 1] = -800.0  # lung
pct[(x / 3) ** 2 + ((y + 9) / 3) ** 2 <= 1] = 700.0  # spine

# the CBCT: same anatomy plus streaks, a cupping bowl and noise
rng = np.random.default_rng(3)
angle = np.arctan2(y, x)
streaks = 120.0 * np.cos(9 * angle) * np.exp(-np.hypot(x, y) / 12)
cupping = -150.0 * (1 - (x**2 + y**2) / 400.0)
cbct = np.clip(pct + (streaks + cupping) * body + rng.normal(0, 30, pct.shape), -1000, 3095)

pct_v = Volume3(grid, pct, "HU")
cbct01 = hu_to_unit01(Volume3(grid, cbct, "HU"))


def laplacian_ratio(a):
    # high-frequency share: variance of the discrete Laplacian over variance
    lap = -6 * a
    for ax in range(3):
        lap += np.roll(a, 1, ax) + np.roll(a, -1, ax)
    return lap[2:-2, 2:-2, 2:-2].var() / a[2:-2, 2:-2, 2:-2].var()


print("setting                          artifact std   lap/var   psCBCT HU range")
for p in DEFAULT_BANK:
    art = extract_artifact(cbct01, p)
    lo, hi = injection_range(hu_to_unit01(pct_v), art)
    out = inject_artifact(hu_to_unit01(pct_v), art)
    hu_lo, hu_hi = lo * HU_SPAN + HU_MIN, hi * HU_SPAN + HU_MIN
    name = f"a={p.alpha:.1f} b={p.beta:.1f} w={p.window[0]:2d} g={p.gain:.2f}"
    print(f"{name:32s} {art.base.data.std():12.4f} {laplacian_ratio(art.base.data):9.2f}"
          f"   [{hu_lo:7.1f}, {hu_hi:7.1f}]")
    assert out.data.min() == 0.0 and out.data.max() == 1.0
