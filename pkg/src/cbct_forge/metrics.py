"""Image similarity (MSSIM, MAE, RMSE, PSNR) and segmentation overlap/surface
metrics (DICE, MSD, HD95), plus the per-case report writer.

Undefined results (PSNR of identical images, DICE of two empty masks,
surface distances involving an empty mask) are returned as NaN and written
as ``"undefined"`` in reports.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volcore import (
    HU_MAX, HU_MIN, HU_SPAN, ORGAN_NAMES, SCHEME_LABELS, LabelVolume, Volume3, check_same_grid,
    write_volume,
)

C1 = 0.01**2
C2 = 0.03**2
HIST_BINS = 256

IMAGE_COLUMNS = ("MSSIM", "MAE (HU)", "PSNR (dB)", "RMSE (HU)")
SEG_COLUMNS = ("DICE", "MSD (mm)", "HD95 (mm)")


def _unit_interval(a: Volume3, b: Volume3) -> tuple[np.ndarray, np.ndarray]:
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    if a.unit == "HU" and b.unit == "HU":
        return (np.clip(x, HU_MIN, HU_MAX) - HU_MIN) / HU_SPAN, (np.clip(y, HU_MIN, HU_MAX) - HU_MIN) / HU_SPAN
    if a.unit == "normalizedSigned" and b.unit == "normalizedSigned":
        return (x + 1.0) / 2.0, (y + 1.0) / 2.0
    if a.unit == "normalized01" and b.unit == "normalized01":
        return x, y
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    span = hi - lo if hi > lo else 1.0
    return (x - lo) / span, (y - lo) / span


def _valid_window_means(arr: np.ndarray, window: int) -> np.ndarray:
    m = ndimage.uniform_filter(arr, size=window, mode="constant")
    h = window // 2
    return m[h:-h or None, h:-h or None, h:-h or None] if h else m


def mssim(a: Volume3, b: Volume3, window: int = 7) -> float:
    """Mean SSIM over every full ``window``^3 cube (stride 1).

    Both volumes are first mapped to [0, 1] (HU through the fixed
    [-1000, 3095] window); local statistics use population moments.
    """
    check_same_grid(a, b)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 1")
    if min(a.grid.dims) < window:
        raise ValueError(f"volume {a.grid.dims} is smaller than the {window}^3 window")
    x, y = _unit_interval(a, b)
    mx = _valid_window_means(x, window)
    my = _valid_window_means(y, window)
    vx = _valid_window_means(x * x, window) - mx * mx
    vy = _valid_window_means(y * y, window) - my * my
    cxy = _valid_window_means(x * y, window) - mx * my
    ssim = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(ssim.mean())


def _diff(a: Volume3, b: Volume3) -> np.ndarray:
    check_same_grid(a, b)
    return (a.data.astype(np.float64) - b.data.astype(np.float64)).ravel()


# math.fsum gives correctly rounded sums, so results do not depend on
# array layout or summation order.
def mae(a: Volume3, b: Volume3) -> float:
    d = _diff(a, b)
    return math.fsum(np.abs(d).tolist()) / d.size


def mse(a: Volume3, b: Volume3) -> float:
    d = _diff(a, b)
    return math.fsum((d * d).tolist()) / d.size


def rmse(a: Volume3, b: Volume3) -> float:
    d = _diff(a, b)
    peak = float(np.abs(d).max()) if d.size else 0.0
    if 0.0 < peak < 1e-100:
        # squares of tiny differences underflow; rescale first
        r = d / peak
        return peak * math.sqrt(math.fsum((r * r).tolist()) / d.size)
    return math.sqrt(math.fsum((d * d).tolist()) / d.size)


def psnr(a: Volume3, b: Volume3, reference: str = "b") -> float:
    """20 log10(max(I_r)) - 10 log10(MSE); NaN when MSE = 0 or max(I_r) <= 0."""
    if reference not in ("a", "b"):
        raise ValueError("reference must be 'a' or 'b'")
    err = mse(a, b)
    peak = float((a if reference == "a" else b).data.max())
    if err == 0.0 or peak <= 0.0:
        return math.nan
    return 20.0 * math.log10(peak) - 10.0 * math.log10(err)


def _masks(x: LabelVolume, y: LabelVolume, organ: int):
    check_same_grid(x, y)
    return x.labels == organ, y.labels == organ


def dice(x: LabelVolume, y: LabelVolume, organ: int) -> float:
    mx, my = _masks(x, y, organ)
    total = int(mx.sum()) + int(my.sum())
    if total == 0:
        return math.nan
    return 2.0 * int(np.logical_and(mx, my).sum()) / total


_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour; the
    outside of the array counts as background."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    interior = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~interior


def _surface_points(mask: np.ndarray, grid) -> np.ndarray:
    idx = np.argwhere(surface_voxels(mask))[:, ::-1].astype(np.float64)  # x, y, z
    return idx * np.asarray(grid.spacing) + np.asarray(grid.origin)


def directed_surface_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every point in ``src`` to its nearest point in ``dst``.

    The KD-tree proposes candidates; the distance itself is recomputed as
    sqrt(sum(diff**2)) over all candidates within a hair of the tree's
    answer so that ties resolve to the exact minimum.
    """
    tree = cKDTree(dst)
    approx, _ = tree.query(src)
    out = np.empty(len(src))
    radius = approx * (1.0 + 1e-9) + 1e-9
    for k, (p, r) in enumerate(zip(src, radius)):
        cand = dst[tree.query_ball_point(p, r)]
        out[k] = np.sqrt(np.sum((cand - p) ** 2, axis=-1)).min()
    return out


def _nearest_rank(values: np.ndarray, pct: int = 95) -> float:
    ordered = np.sort(values)
    rank = (pct * len(ordered) + 99) // 100  # ceil(pct/100 * n)
    return float(ordered[max(rank, 1) - 1])


def _surface_pair(x: LabelVolume, y: LabelVolume, organ: int):
    mx, my = _masks(x, y, organ)
    if not mx.any() or not my.any():
        return None
    px = _surface_points(mx, x.grid)
    py = _surface_points(my, y.grid)
    return directed_surface_distances(px, py), directed_surface_distances(py, px)


def msd(x: LabelVolume, y: LabelVolume, organ: int) -> float:
    """Mean of the two directed mean surface distances (mm)."""
    pair = _surface_pair(x, y, organ)
    if pair is None:
        return math.nan
    dxy, dyx = pair
    return 0.5 * (math.fsum(dxy.tolist()) / len(dxy) + math.fsum(dyx.tolist()) / len(dyx))


def hd95(x: LabelVolume, y: LabelVolume, organ: int) -> float:
    """Mean of the two directed nearest-rank 95th-percentile surface distances (mm)."""
    pair = _surface_pair(x, y, organ)
    if pair is None:
        return math.nan
    dxy, dyx = pair
    return 0.5 * (_nearest_rank(dxy) + _nearest_rank(dyx))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalCase:
    name: str
    pred: Volume3
    truth: Volume3
    pred_labels: LabelVolume | None = None
    truth_labels: LabelVolume | None = None


@dataclass
class ImageMetricReport:
    cases: dict[str, dict[str, float]] = field(default_factory=dict)

    def summary(self) -> dict[str, tuple[float, float]]:
        return {col: mean_std([c[key] for c in self.cases.values()]) for col, key in zip(IMAGE_COLUMNS, _IMAGE_KEYS)}


@dataclass
class SegMetricReport:
    cases: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    scheme: str = "eso4"

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        out = {}
        for organ in SCHEME_LABELS[self.scheme]:
            rows = [c[organ] for c in self.cases.values() if organ in c]
            out[organ] = {col: mean_std([r[key] for r in rows]) for col, key in zip(SEG_COLUMNS, _SEG_KEYS)}
        return out


_IMAGE_KEYS = ("mssim", "mae_hu", "psnr_db", "rmse_hu")
_SEG_KEYS = ("dice", "msd_mm", "hd95_mm")


def mean_std(values) -> tuple[float, float]:
    """Mean and population std over the defined (non-NaN) values."""
    vals = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    return float(vals.mean()), float(vals.std())


def format_mean_std(m: float, s: float, digits: int = 2) -> str:
    if math.isnan(m):
        return "undefined"
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def _jsonable(v):
    if isinstance(v, float) and math.isnan(v):
        return "undefined"
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def image_metrics(pred: Volume3, truth: Volume3, window: int = 7) -> dict[str, float]:
    return {
        "mssim": mssim(pred, truth, window),
        "mae_hu": mae(pred, truth),
        "psnr_db": psnr(pred, truth, reference="b"),
        "rmse_hu": rmse(pred, truth),
    }


def seg_metrics(pred: LabelVolume, truth: LabelVolume) -> dict[str, dict[str, float]]:
    out = {}
    for organ, label in SCHEME_LABELS[truth.scheme].items():
        out[organ] = {"dice": dice(pred, truth, label), "msd_mm": msd(pred, truth, label), "hd95_mm": hd95(pred, truth, label)}
    return out


def hu_histogram(v: Volume3, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.clip(v.data, HU_MIN, HU_MAX), bins=bins, range=(HU_MIN, HU_MAX))
    return counts, edges


def report(cases, outdir=None, window: int = 7) -> tuple[ImageMetricReport, SegMetricReport]:
    """Evaluate ``cases`` (iterable of :class:`EvalCase`, truth as reference).

    With ``outdir`` set, writes ``report.json``, ``report.csv`` (image table
    then segmentation table, mean ± population std), ``hist_<case>.csv``
    (256 HU bins for prediction and truth) and ``residual_<case>`` VOL1
    volumes (prediction - truth).
    """
    cases = list(cases)
    img = ImageMetricReport()
    seg = SegMetricReport()
    for case in cases:
        img.cases[case.name] = image_metrics(case.pred, case.truth, window)
        if case.pred_labels is not None and case.truth_labels is not None:
            seg.scheme = case.truth_labels.scheme
            seg.cases[case.name] = seg_metrics(case.pred_labels, case.truth_labels)
    if outdir is not None:
        _write_report(cases, img, seg, Path(outdir))
    return img, seg


def _write_report(cases, img: ImageMetricReport, seg: SegMetricReport, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    img_summary = img.summary()
    seg_summary = seg.summary() if seg.cases else {}
    doc = {
        "image": {"cases": img.cases, "summary": {k: {"mean": m, "std": s} for k, (m, s) in img_summary.items()}},
        "segmentation": {
            "scheme": seg.scheme,
            "cases": seg.cases,
            "summary": {o: {k: {"mean": m, "std": s} for k, (m, s) in cols.items()} for o, cols in seg_summary.items()},
        },
        "std_convention": "population",
    }
    (outdir / "report.json").write_text(json.dumps(_jsonable(doc), indent=2) + "\n")

    with open(outdir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("Modality/Settings",) + IMAGE_COLUMNS)
        w.writerow(("prediction vs truth",) + tuple(format_mean_std(*img_summary[c]) for c in IMAGE_COLUMNS))
        if seg_summary:
            w.writerow(())
            w.writerow(("Anatomy",) + SEG_COLUMNS)
            for organ, cols in seg_summary.items():
                w.writerow((ORGAN_NAMES[organ],) + tuple(format_mean_std(*cols[c]) for c in SEG_COLUMNS))

    for case in cases:
        residual = Volume3(case.pred.grid, case.pred.data.astype(np.float64) - case.truth.data, "unitless")
        write_volume(residual, outdir / f"residual_{case.name}")
        counts_a, edges = hu_histogram(case.pred)
        counts_b, _ = hu_histogram(case.truth)
        with open(outdir / f"hist_{case.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("bin_lo", "bin_hi", "count_a", "count_b"))
            for k in range(len(counts_a)):
                w.writerow((repr(float(edges[k])), repr(float(edges[k + 1])), int(counts_a[k]), int(counts_b[k])))
