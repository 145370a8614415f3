"""The eleven release criteria, each at its stated tolerance.

Every test prints exactly one ``CRITERION n: PASS|FAIL ...`` line
(outside pytest's capture, so it shows up in the log either way).
"""
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numba
import numpy as np
import pytest

from cbct_forge.artifact import PlaheParams, plahe
from cbct_forge.cli import main
from cbct_forge.ganplan import discriminator_loss, generator_loss, learning_rate, noise_variance, plan_net
from cbct_forge.geomaug import AffineSpec, apply_affine
from cbct_forge.metrics import dice, hd95, mae, mse, msd, mssim, psnr, rmse
from cbct_forge.osart import OsartConfig, osart_reconstruct
from cbct_forge.volcore import (
    decode_labels, denormalize_ct, encode_labels, normalize_ct, read_labels, read_volume, write_volume,
)
from cbct_forge.xproj import ConeBeamGeometry, forward_project, project_array
from conftest import make_labels, make_volume
from oracles import (
    box_mean_loop, chord_oracle, dice_loop, ellipsoid_phantom, mae_loop, mse_loop, plahe_loop, ssim_windows,
    surface_distance_loop,
)


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, title):
        notes = []
        try:
            yield notes
        except BaseException:
            with capsys.disabled():
                print(f"\nCRITERION {number}: FAIL  {title}  {'; '.join(notes)}")
            raise
        with capsys.disabled():
            print(f"\nCRITERION {number}: PASS  {title}  {'; '.join(notes)}")
    return run


@contextmanager
def threads(n):
    before = numba.get_num_threads()
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        yield
    finally:
        numba.set_num_threads(before)


@pytest.fixture(scope="module")
def phantom64():
    return make_volume(ellipsoid_phantom(64))


DESK_GEOMETRY = ConeBeamGeometry(det_dims=(64, 64), det_spacing=(2.0, 2.0), n_views=60)


def test_criterion_01_receptive_field(criterion, capsys):
    with criterion(1, "discriminator receptive-field chain") as notes:
        code = main(["plan-net", "--arch", "discriminator"])
        doc = json.loads(capsys.readouterr().out)
        assert code == 0
        assert doc["receptive_field_chain"] == [1, 4, 7, 16, 34, 70]
        assert doc["receptive_field"] == 70
        best = math.inf
        for _ in range(20):
            t0 = time.perf_counter()
            plan_net("discriminator")
            best = min(best, time.perf_counter() - t0)
        notes.append(f"chain {doc['receptive_field_chain']}, plan {best * 1e3:.3f} ms")
        assert best < 1e-3


def test_criterion_02_normalization_endpoints(criterion):
    with criterion(2, "HU and label normalization endpoints") as notes:
        hu = make_volume(np.array([-1000.0, 3095.0]).reshape(2, 1, 1), "HU")
        n = normalize_ct(hu).data.ravel()
        assert n.tolist() == [-1.0, 1.0]
        lab = encode_labels(make_labels(np.array([0, 4], dtype=np.uint8).reshape(2, 1, 1))).data.ravel()
        assert lab.tolist() == [-1.0, 1.0]
        values = np.random.default_rng(0).uniform(-1000, 3095, (16, 16, 16))
        back = denormalize_ct(normalize_ct(make_volume(values, "HU"))).data
        err = float(np.max(np.abs(back - values)))
        labels = np.random.default_rng(1).integers(0, 5, (8, 8, 8)).astype(np.uint8)
        assert np.array_equal(decode_labels(encode_labels(make_labels(labels))).labels, labels)
        notes.append(f"max HU round-trip error {err:.2e}")
        assert err < 1e-4


def test_criterion_03_projector_chord(criterion):
    with criterion(3, "central-ray chord through a 64^3 cube, 64^2 x 60 runtime") as notes:
        n = 64
        cube = make_volume(np.ones((n, n, n)))
        # an odd detector puts one bin exactly on the central ray
        for deg, tol in ((0.0, 0.01), (45.0, 0.02)):
            theta = math.radians(deg)
            geo = ConeBeamGeometry(det_dims=(65, 65), det_spacing=(2.0, 2.0), angles=[theta])
            got = float(forward_project(cube, geo).data[0, 32, 32])
            expected = chord_oracle(theta, n / 2)
            rel = abs(got - expected) / expected
            notes.append(f"{deg:g} deg: {got:.3f} vs {expected:.3f} ({rel:.2%})")
            assert rel < tol
        phantom = make_volume(ellipsoid_phantom(n))
        with threads(1):
            forward_project(make_volume(np.ones((4, 4, 4))), ConeBeamGeometry(det_dims=(4, 4), n_views=1))
            t0 = time.perf_counter()
            forward_project(phantom, DESK_GEOMETRY)
            elapsed = time.perf_counter() - t0
        notes.append(f"64^2 x 60 views single-threaded {elapsed:.2f} s")
        assert elapsed < 5.0


def test_criterion_04_projector_linearity(criterion):
    with criterion(4, "projector superposition on random 32^3 volumes") as notes:
        rng = np.random.default_rng(4)
        a, b = rng.random((32, 32, 32)), rng.random((32, 32, 32))
        grid = make_volume(a).grid
        geo = ConeBeamGeometry(det_dims=(48, 48), det_spacing=(1.0, 1.0), n_views=12)
        pa, pb = project_array(a, grid, geo), project_array(b, grid, geo)
        pab = project_array(0.4 * a + 0.6 * b, grid, geo)
        rel = float(np.linalg.norm(pab - (0.4 * pa + 0.6 * pb)) / np.linalg.norm(pab))
        notes.append(f"relative error {rel:.2e}")
        assert rel < 1e-5


def test_criterion_05_osart_self_consistency(criterion, phantom64):
    with criterion(5, "OS-SART on the 64^3 ellipsoid phantom") as notes:
        proj = forward_project(phantom64, DESK_GEOMETRY)
        with threads(4):
            t0 = time.perf_counter()
            rec, rep = osart_reconstruct(proj, phantom64.grid, OsartConfig(n_subsets=6, n_iterations=10, relax=0.5))
            elapsed = time.perf_counter() - t0
        err = float(np.mean(np.abs(rec.data - phantom64.data)))
        ratio = rep.residuals[5 * 6 - 1] / rep.residuals[0]
        notes.append(f"MAE {err:.4f}, residual ratio after pass 5 {ratio:.3f}, {elapsed:.1f} s")
        assert err < 0.03
        assert ratio < 0.2
        assert elapsed < 60.0


def test_criterion_06_osart_fixed_point(criterion, phantom64):
    with criterion(6, "consistent data is a fixed point") as notes:
        proj = forward_project(phantom64, DESK_GEOMETRY)
        rec, _ = osart_reconstruct(proj, phantom64.grid, OsartConfig(6, 1, 0.5), x0=phantom64)
        change = float(np.max(np.abs(rec.data - phantom64.data)))
        notes.append(f"max change after one pass {change:.2e}")
        assert change < 1e-6


def test_criterion_07_metric_oracles(criterion):
    with criterion(7, "metrics equal direct-loop oracles") as notes:
        rng = np.random.default_rng(7)
        a, b = rng.uniform(-1000, 3095, (8, 8, 8)), rng.uniform(-1000, 3095, (8, 8, 8))
        va, vb = make_volume(a, "HU"), make_volume(b, "HU")
        assert mae(va, vb) == mae_loop(a, b)
        assert rmse(va, vb) == math.sqrt(mse_loop(a, b))
        assert mse(va, vb) == mse_loop(a, b)
        assert psnr(va, vb) == 20 * math.log10(float(b.max())) - 10 * math.log10(mse_loop(a, b))
        la, lb = rng.integers(0, 5, (8, 8, 8)), rng.integers(0, 5, (8, 8, 8))
        for organ in range(1, 5):
            assert dice(make_labels(la), make_labels(lb), organ) == dice_loop(la, lb, organ)
        x, y = rng.random((12, 12, 12)), rng.random((12, 12, 12))
        gap = abs(mssim(make_volume(x), make_volume(y)) - ssim_windows(x, y, 7))
        assert gap < 1e-8
        mx = (rng.random((10, 10, 10)) < 0.3).astype(np.uint8)
        my = (rng.random((10, 10, 10)) < 0.25).astype(np.uint8)
        lx, ly = make_labels(mx, spacing=(1.17, 1.17, 3.0)), make_labels(my, spacing=(1.17, 1.17, 3.0))
        exp_msd, exp_hd = surface_distance_loop(mx == 1, my == 1, (1.17, 1.17, 3.0), lx.grid.origin)
        assert msd(lx, ly, 1) == exp_msd
        assert hd95(lx, ly, 1) == exp_hd
        notes.append(f"MSSIM gap {gap:.1e}, MSD {exp_msd:.4f}, HD95 {exp_hd:.4f}")


def test_criterion_08_plahe_closed_forms(criterion):
    with criterion(8, "PL-AHE closed forms") as notes:
        const = make_volume(np.full((9, 10, 11), 0.42))
        for p in (PlaheParams(1.0, 1.0, (3, 3, 3)), PlaheParams(0.3, 0.6, (5, 7, 3)), PlaheParams(0.05, 0.0, (9, 9, 9))):
            assert np.all(plahe(const, p).data == 0.5)
        rng = np.random.default_rng(8)
        f = rng.random((10, 9, 8))
        out = plahe(make_volume(f), PlaheParams(0.4, 0.0, (5, 5, 3))).data
        beta0 = float(np.max(np.abs(out - (0.5 + 0.5 * (f - box_mean_loop(f, (5, 5, 3)))))))
        assert beta0 < 1e-6
        g = rng.random((8, 8, 8))
        full = plahe(make_volume(g), PlaheParams(1.0, 1.0, (15, 15, 15))).data
        gap = float(np.max(np.abs(full - plahe_loop(g, (15, 15, 15), 1.0, 1.0))))
        assert gap < 1e-6
        notes.append(f"beta=0 gap {beta0:.1e}, full-window gap {gap:.1e}")


def test_criterion_09_loss_arithmetic(criterion):
    with criterion(9, "loss examples and schedule endpoints") as notes:
        ones, zeros, half = np.ones(32), np.zeros(32), np.full(32, 0.5)
        cases = [
            (generator_loss(ones, half, half), 0.0),
            (generator_loss(zeros, half, half), 1.0),
            (generator_loss(ones, half, half + 0.01), 1.0),
            (discriminator_loss(ones, zeros), 0.0),
            (discriminator_loss(zeros, ones), 1.0),
            (discriminator_loss(half, half), 0.25),
        ]
        worst = max(abs(got - want) for got, want in cases)
        assert worst < 1e-12
        assert noise_variance(0) == 0.2 and noise_variance(99) == 0.0
        assert learning_rate(0) == 0.0002 and learning_rate(99) == 0.0
        notes.append(f"worst loss error {worst:.1e}")


def _write_triple(d: Path, n: int):
    c = np.arange(n) - (n - 1) / 2
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    s = n / 64
    body = (x / (28 * s)) ** 2 + (y / (22 * s)) ** 2 + (z / (26 * s)) ** 2 <= 1
    lung = ((x - 12 * s) / (8 * s)) ** 2 + (y / (10 * s)) ** 2 + (z / (14 * s)) ** 2 <= 1
    spine = ((x / (4 * s)) ** 2 + ((y + 14 * s) / (4 * s)) ** 2 <= 1) & body
    pct = np.where(body, 40.0, -1000.0)
    pct[lung] = -800.0
    pct[spine] = 700.0
    rng = np.random.default_rng(10)
    streak = 80.0 * np.sin(x / 2.0)[..., :] * body
    cbct = np.clip(pct + streak + rng.normal(0, 40, pct.shape), -1000, 3095)
    labels = np.zeros(pct.shape, dtype=np.uint8)
    labels[lung] = 1
    labels[spine] = 3
    write_volume(make_volume(pct, "HU"), d / "pct")
    write_volume(make_volume(cbct, "HU"), d / "cbct")
    write_volume(make_labels(labels, "eso4"), d / "labels")


def _job(geometry: dict, osart: dict | None = None) -> dict:
    pipeline = {"geometry": geometry, "seed": 2024, "noise_sigma": 0.01}
    if osart:
        pipeline["osart"] = osart
    return {"schema_version": "1.0", "pipeline": pipeline}


def _compose(d: Path, job: dict, outdir: Path, capsys) -> dict:
    (d / "job.json").write_text(json.dumps(job))
    code = main(["compose", "--pct", str(d / "pct"), "--cbct", str(d / "cbct"), "--labels", str(d / "labels"),
                 "--config", str(d / "job.json"), "--outdir", str(outdir)])
    capsys.readouterr()
    assert code == 0
    return json.loads((outdir / "manifest.json").read_text())


def _records(manifest):
    return manifest["records"] if isinstance(manifest, dict) else manifest


@pytest.mark.slow
def test_criterion_10_pipeline_determinism(criterion, tmp_path, capsys):
    with criterion(10, "compose determinism, pairing, cardinality, desk-scale runtime") as notes:
        small = tmp_path / "small"
        small.mkdir()
        _write_triple(small, 24)
        job = _job({"det_dims": [32, 32], "det_spacing": [2.0, 2.0], "n_views": 12},
                   {"n_subsets": 3, "n_iterations": 2, "relax": 0.5})
        m1 = _compose(small, job, small / "run1", capsys)
        m2 = _compose(small, job, small / "run2", capsys)
        assert m1 == m2
        names = sorted(p.name for p in (small / "run1").iterdir())
        assert names == sorted(p.name for p in (small / "run2").iterdir())
        for name in names:
            assert (small / "run1" / name).read_bytes() == (small / "run2" / name).read_bytes()
        assert len(_records(m1)) == 15

        desk = tmp_path / "desk"
        desk.mkdir()
        _write_triple(desk, 64)
        with threads(4):
            t0 = time.perf_counter()
            manifest = _compose(desk, _job({"det_dims": [64, 64], "det_spacing": [2.0, 2.0], "n_views": 60}),
                                desk / "out", capsys)
            elapsed = time.perf_counter() - t0
        records = _records(manifest)
        assert len(records) == 15
        for r in records:
            out = r["outputs"]
            grids = {read_volume(desk / "out" / out["pct"]).grid, read_volume(desk / "out" / out["pscbct"]).grid,
                     read_labels(desk / "out" / out["labels"]).grid}
            assert len(grids) == 1
        notes.append(f"15 records, bit-identical rerun, desk-scale compose {elapsed:.0f} s")
        assert elapsed < 15 * 60


def test_criterion_11_volume_law(criterion):
    with criterion(11, "labeled sphere volume under scale 0.8") as notes:
        n = 64
        c = np.arange(n) - (n - 1) / 2
        z, y, x = np.meshgrid(c, c, c, indexing="ij")
        sphere = make_labels(((x**2 + y**2 + z**2) <= 18.0**2).astype(np.uint8) * 2)
        out = apply_affine(sphere, AffineSpec("scale_rotate", scale=0.8, rotate_deg=0.0))
        ratio = np.count_nonzero(out.labels) / np.count_nonzero(sphere.labels)
        rel = abs(ratio / 0.8**3 - 1)
        notes.append(f"count ratio {ratio:.4f} vs {0.8 ** 3:.4f} ({rel:.2%})")
        assert rel < 0.05
