"""Score a degraded volume and label map against the truth, then print
the layer plan and receptive field of the patch discriminator.

    python demos/04_evaluate_and_plan_net.py [outdir]
"""
import csv
import sys
import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage

from cbct_forge import EvalCase, Grid3, LabelVolume, Volume3, plan_net, report

outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cbct_forge_eval_"))

n = 40
c = np.arange(n) - (n - 1) / 2
z, y, x = np.meshgrid(c, c, c, indexing="ij")
grid = Grid3((n, n, n), (1.17, 1.17, 3.0), (0.0, 0.0, 0.0))
body = (x / 17) ** 2 + (y / 13) ** 2 + (z / 18) ** 2 <= 1
lung = ((x - 7) / 5) ** 2 + (y / 7) ** 2 + (z / 10) ** 2 <= 1
heart = ((x + 5) / 5) ** 2 + (y / 5) ** 2 + (z / 5) ** 2 <= 1
truth_hu = np.where(body, 40.0, -1000.0)
truth_hu[lung], truth_hu[heart] = -800.0, 50.0
truth_lab = np.zeros(truth_hu.shape, dtype=np.uint8)
truth_lab[lung], truth_lab[heart] = 1, 2

rng = np.random.default_rng(5)
cases = []
for k, sigma in enumerate((15.0, 40.0, 80.0)):
    pred_hu = np.clip(truth_hu + rng.normal(0, sigma, truth_hu.shape), -1000, 3095)
    # a segmentation that is off by a dilation or erosion of the lung
    pred_lab = truth_lab.copy()
    grown = ndimage.binary_dilation(lung, iterations=k) if k else lung
    pred_lab[grown & (truth_lab == 0)] = 1
    cases.append(EvalCase(f"noise{int(sigma)}", Volume3(grid, pred_hu, "HU"), Volume3(grid, truth_hu, "HU"),
                          LabelVolume(grid, pred_lab, "eso4"), LabelVolume(grid, truth_lab, "eso4")))

img, seg = report(cases, outdir)
print(f"reports in {outdir}")
for row in csv.reader(open(outdir / "report.csv", encoding="utf-8")):
    print("  " + " | ".join(row))

plan = plan_net("discriminator", (128, 128, 128))
print("\npatch discriminator on 128^3:")
for layer in plan.to_dict()["layers"]:
    print(f"  {layer['name']:8s} K={layer['kernel']} S={layer['stride']} -> {layer['output_dims']}")
print("  " + "\n  ".join(plan.rf_steps()))
print(f"  one output element sees a {plan.receptive_field}^3 input patch")
