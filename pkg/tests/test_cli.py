import json
import subprocess
import sys

import numpy as np
import pytest

from cbct_forge import __version__
from cbct_forge.cli import EXIT_CODES, main
from cbct_forge.volcore import read_labels, read_volume, write_volume
from conftest import make_labels, make_volume


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error_json(err):
    return json.loads(err.strip().splitlines()[-1])


def _write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def _ball(n, r, shift=(0, 0, 0)):
    c = np.arange(n) - (n - 1) / 2
    z, y, x = np.meshgrid(c - shift[0], c - shift[1], c - shift[2], indexing="ij")
    return x**2 + y**2 + z**2 <= r * r


@pytest.fixture
def triple(tmp_path):
    n = 16
    rng = np.random.default_rng(7)
    body, bone = _ball(n, 6.4), _ball(n, 2.4, (2, 0, 0))
    pct = np.where(body, 40.0, -1000.0) + np.where(bone, 900.0, 0.0)
    cbct = np.clip(pct + rng.normal(0, 60, pct.shape), -1000, 3095)
    labels = body.astype(np.uint8) + bone.astype(np.uint8)
    write_volume(make_volume(pct, "HU"), tmp_path / "pct")
    write_volume(make_volume(cbct, "HU"), tmp_path / "cbct")
    write_volume(make_labels(labels, "eso1"), tmp_path / "labels")
    return tmp_path


def _job(tmp_path, n_bank=2, n_geoms=2):
    bank = [{"alpha": 1.0, "beta": 1.0, "window": 3, "gain": 0.5},
            {"alpha": 0.5, "beta": 0.5, "window": 5, "gain": 0.3},
            {"alpha": 0.3, "beta": 0.0, "window": 7, "gain": 0.3},
            {"alpha": 0.7, "beta": 0.2, "window": 5, "gain": 0.2},
            {"alpha": 0.9, "beta": 0.8, "window": 3, "gain": 0.4}][:n_bank]
    geoms = [{"kind": "identity"}, {"kind": "scale_shear", "scale": 1.2, "shear_deg": 8.0},
             {"kind": "scale_rotate", "scale": 0.8, "rotate_deg": 5.0}][:n_geoms]
    return {
        "schema_version": "1.0",
        "pipeline": {
            "artifact_bank": bank,
            "geoms": geoms,
            "geometry": {"det_dims": [24, 24], "det_spacing": [1.5, 1.5], "n_views": 8},
            "osart": {"n_subsets": 2, "n_iterations": 2, "relax": 0.5},
            "noise_sigma": 0.01,
            "seed": 5,
            "label_scheme": "eso4",
        },
    }


# --- global flags ----------------------------------------------------------------------

def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == f"cbct-forge {__version__}"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cbct_forge", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "cbct-forge" in res.stdout


def test_schema_printed(capsys):
    code, out, _ = _run(capsys, "--schema")
    doc = json.loads(out)
    assert code == 0
    assert doc["properties"]["schema_version"]["const"] == "1.0"
    assert "pipeline" in doc["$defs"]


def test_no_command_is_usage_error(capsys):
    code, _, err = _run(capsys)
    assert code == EXIT_CODES["usage"]
    assert _error_json(err)["error"] == "usage"


def test_unknown_flag(capsys):
    code, _, err = _run(capsys, "plan-net", "--arch", "discriminator", "--bogus")
    assert code == 2 and _error_json(err)["error"] == "usage"


# --- plan-net ---------------------------------------------------------------------------

def test_plan_net_discriminator(capsys):
    code, out, _ = _run(capsys, "plan-net", "--arch", "discriminator")
    doc = json.loads(out)
    assert code == 0
    assert doc["receptive_field"] == 70
    assert doc["receptive_field_chain"] == [1, 4, 7, 16, 34, 70]
    assert doc["output_dims"] == [14, 14, 14]
    assert len(doc["layers"]) == 5


def test_plan_net_generator_single_dim(capsys):
    code, out, _ = _run(capsys, "plan-net", "--arch", "generator", "--input-dims", "128")
    doc = json.loads(out)
    assert code == 0 and doc["output_dims"] == [128, 128, 128]


def test_plan_net_bad_dims(capsys):
    code, _, err = _run(capsys, "plan-net", "--arch", "generator", "--input-dims", "64", "64")
    assert code == 2
    code, _, err = _run(capsys, "plan-net", "--arch", "discriminator", "--input-dims", "8")
    assert code == EXIT_CODES["invalid_value"]
    assert "non-positive" in _error_json(err)["message"]


# --- errors -------------------------------------------------------------------------------

def test_missing_file(capsys, tmp_path):
    params = _write_json(tmp_path / "p.json", {"alpha": 1.0, "beta": 1.0, "window": 3})
    code, _, err = _run(capsys, "extract", "--cbct", tmp_path / "nope", "--params", params, "--out", tmp_path / "a")
    assert code == EXIT_CODES["missing_file"]
    assert _error_json(err)["error"] == "missing_file"
    assert not (tmp_path / "a.json").exists()


def test_schema_violation(capsys, triple):
    params = _write_json(triple / "p.json", {"alpha": 0.0, "beta": 1.0, "window": 3})
    code, _, err = _run(capsys, "extract", "--cbct", triple / "cbct", "--params", params, "--out", triple / "a")
    assert code == EXIT_CODES["schema_violation"]
    msg = _error_json(err)["message"]
    assert "alpha" in msg
    assert err.splitlines()[0].startswith("cbct-forge: error:")


def test_invalid_json(capsys, triple):
    (triple / "bad.json").write_text("{not json")
    code, _, err = _run(capsys, "extract", "--cbct", triple / "cbct", "--params", triple / "bad.json", "--out", triple / "a")
    assert code == EXIT_CODES["format_error"]


def test_compose_rejects_wrong_version(capsys, triple):
    job = _job(triple)
    job["schema_version"] = "0.9"
    cfg = _write_json(triple / "job.json", job)
    code, _, err = _run(capsys, "compose", "--config", cfg, "--pct", triple / "pct", "--cbct", triple / "cbct",
                        "--labels", triple / "labels", "--outdir", triple / "out")
    assert code == EXIT_CODES["schema_violation"]
    assert not (triple / "out").exists()


# --- single-stage commands ----------------------------------------------------------------

def test_extract_inject_project_reconstruct(capsys, triple):
    d = triple
    params = _write_json(d / "plahe.json", {"alpha": 0.5, "beta": 0.5, "window": 5, "gain": 0.3})
    assert _run(capsys, "extract", "--cbct", d / "cbct", "--params", params, "--out", d / "art")[0] == 0
    art = read_volume(d / "art")
    assert art.unit == "unitless" and art.meta["plahe"]["window"] == [5, 5, 5]

    assert _run(capsys, "inject", "--pct", d / "pct", "--artifact", d / "art", "--out", d / "inj")[0] == 0
    inj = read_volume(d / "inj")
    assert inj.unit == "normalized01"
    assert inj.data.min() == 0.0 and inj.data.max() == 1.0
    lo, hi = inj.meta["hu_range"]
    assert lo < hi

    geo = _write_json(d / "geo.json", {"det_dims": [24, 24], "det_spacing": [1.5, 1.5], "n_views": 8})
    code, *_ = _run(capsys, "project", "--vol", d / "inj", "--geometry", geo, "--noise-sigma", 0.01, "--seed", 3,
                    "--out", d / "scan")
    assert code == 0 and (d / "scan.proj.json").is_file()

    osart = _write_json(d / "osart.json", {"n_subsets": 2, "n_iterations": 3, "relax": 0.5})
    code, *_ = _run(capsys, "reconstruct", "--proj", d / "scan.proj.json", "--grid", d / "inj.json",
                    "--osart-config", osart, "--out", d / "rec", "--report", d / "rec_report.json",
                    "--hu-range", lo, hi)
    assert code == 0
    rec = read_volume(d / "rec")
    assert rec.unit == "HU" and rec.grid == inj.grid
    assert lo - 1e-6 <= rec.data.min() and rec.data.max() <= hi + 1e-6
    assert len(json.loads((d / "rec_report.json").read_text())["residuals"]) == 6


def test_inject_rejects_non_artifact(capsys, triple):
    code, _, err = _run(capsys, "inject", "--pct", triple / "pct", "--artifact", triple / "cbct", "--out", triple / "x")
    assert code == EXIT_CODES["unit_error"]


def test_project_is_idempotent(capsys, triple):
    d = triple
    write_volume(make_volume(np.random.default_rng(1).random((16, 16, 16))), d / "v")
    geo = _write_json(d / "geo.json", {"det_dims": [20, 20], "det_spacing": [1.5, 1.5], "n_views": 5})
    for out in ("s1", "s2"):
        assert _run(capsys, "project", "--vol", d / "v", "--geometry", geo, "--noise-sigma", 0.02, "--seed", 9,
                    "--out", d / out)[0] == 0
    assert (d / "s1.proj.raw").read_bytes() == (d / "s2.proj.raw").read_bytes()


# --- compose and evaluate ---------------------------------------------------------------------

def test_compose_via_flags(capsys, triple):
    cfg = _write_json(triple / "job.json", _job(triple, 2, 2))
    code, out, _ = _run(capsys, "compose", "--config", cfg, "--pct", triple / "pct", "--cbct", triple / "cbct",
                        "--labels", triple / "labels", "--outdir", triple / "out")
    assert code == 0
    summary = json.loads(out)
    assert summary["records"] == 4
    manifest = json.loads((triple / "out" / "manifest.json").read_text())
    records = manifest["records"] if isinstance(manifest, dict) else manifest
    assert len(records) == 4
    assert all(r["inputs"]["pct"].startswith("sha256:") for r in records)
    saved = json.loads((triple / "out" / "config.json").read_text())
    assert saved == _job(triple, 2, 2)
    for r in records:
        grids = {read_volume(triple / "out" / r["outputs"][k]).grid for k in ("pct", "pscbct")}
        grids.add(read_labels(triple / "out" / r["outputs"]["labels"]).grid)
        assert len(grids) == 1


def test_compose_io_section_and_rerun_identical(capsys, triple):
    job = _job(triple, 1, 2)
    job["io"] = {"pct": str(triple / "pct"), "cbct": str(triple / "cbct"), "labels": str(triple / "labels"),
                 "outdir": str(triple / "a"), "stem": "pt"}
    cfg = _write_json(triple / "job.json", job)
    assert _run(capsys, "compose", "--config", cfg)[0] == 0
    assert _run(capsys, "compose", "--config", cfg, "--outdir", triple / "b")[0] == 0
    files_a = sorted(p.name for p in (triple / "a").iterdir() if p.name != "config.json")
    files_b = sorted(p.name for p in (triple / "b").iterdir() if p.name != "config.json")
    assert files_a == files_b and any(f.startswith("pt_a0_g1") for f in files_a)
    for name in files_a:
        assert (triple / "a" / name).read_bytes() == (triple / "b" / name).read_bytes()


def test_compose_missing_paths(capsys, triple):
    cfg = _write_json(triple / "job.json", _job(triple, 1, 1))
    code, _, err = _run(capsys, "compose", "--config", cfg)
    assert code == 2 and "--pct" in _error_json(err)["message"]


def test_evaluate_pred_equals_truth(capsys, triple):
    d = triple
    code, out, _ = _run(capsys, "evaluate", "--pred", d / "pct.json", "--truth", d / "pct.json",
                        "--pred-labels", d / "labels", "--truth-labels", d / "labels", "--outdir", d / "ev")
    assert code == 0
    summary = json.loads(out)
    assert summary["MAE (HU)"] == "0.00 ± 0.00"
    assert summary["PSNR (dB)"] == "undefined"
    assert (d / "ev" / "report.csv").is_file() and (d / "ev" / "hist_pct.csv").is_file()


def test_evaluate_grid_mismatch(capsys, triple):
    write_volume(make_volume(np.zeros((8, 8, 8)), "HU"), triple / "small")
    code, _, err = _run(capsys, "evaluate", "--pred", triple / "small", "--truth", triple / "pct", "--outdir", triple / "ev")
    assert code == EXIT_CODES["grid_mismatch"]


def test_evaluate_count_mismatch(capsys, triple):
    code, *_ = _run(capsys, "evaluate", "--pred", triple / "pct", triple / "cbct", "--truth", triple / "pct",
                    "--outdir", triple / "ev")
    assert code == 2


def test_threads_flag(capsys):
    code, out, _ = _run(capsys, "--threads", "1", "plan-net", "--arch", "discriminator")
    assert code == 0 and json.loads(out)["receptive_field"] == 70
