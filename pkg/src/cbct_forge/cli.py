"""Batch command-line front end: ``cbct-forge <command> ...``.

Structured settings come from JSON files; flags carry only paths and
scalars. On failure a human-readable line and then one JSON object
``{"error": <code>, "message": ...}`` go to stderr and the exit code is
nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import __version__
from ._parallel import set_threads
from .volcore import GridMismatchError, UnitError, VolumeFormatError, _vol1_paths

EXIT_CODES = {
    "usage": 2,
    "schema_violation": 3,
    "missing_file": 4,
    "format_error": 5,
    "grid_mismatch": 6,
    "unit_error": 7,
    "invalid_value": 8,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _load_json(path, definition: str | None = None) -> dict:
    from .schema import validate

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(str(p))
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("format_error", f"{p}: invalid JSON ({exc})") from None
    try:
        validate(doc, definition)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(k) for k in exc.absolute_path) or "<root>"
        raise CliError("schema_violation", f"{p}: {where}: {exc.message}") from None
    return doc


def _volume_files(path) -> list[Path]:
    p = Path(path)
    if p.suffix.lower() in (".mha", ".mhd"):
        return [p]
    return list(_vol1_paths(p))


def _vol1_exists(path) -> None:
    for f in _volume_files(path):
        if not f.is_file():
            raise FileNotFoundError(str(f))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    from .artifact import PlaheParams, extract_artifact
    from .volcore import hu_to_unit01, read_volume, write_volume

    params = PlaheParams.from_dict(_load_json(args.params, "plahe"))
    _vol1_exists(args.cbct)
    cbct = read_volume(args.cbct)
    if cbct.unit == "HU":
        cbct = hu_to_unit01(cbct)
    art = extract_artifact(cbct, params)
    write_volume(art.base, args.out, extra={"plahe": params.to_dict()})
    return 0


def cmd_inject(args) -> int:
    from .artifact import ArtifactImage, PlaheParams, inject_artifact, injection_range
    from .volcore import HU_MIN, HU_SPAN, hu_to_unit01, read_volume, write_volume

    _vol1_exists(args.pct)
    _vol1_exists(args.artifact)
    pct = read_volume(args.pct)
    base = read_volume(args.artifact)
    if base.unit != "unitless":
        raise UnitError(f"{args.artifact}: artifact volume must be unitless, got {base.unit}")
    params = PlaheParams.from_dict(base.meta["plahe"]) if "plahe" in base.meta else PlaheParams()
    art = ArtifactImage(base, params)
    pct01 = hu_to_unit01(pct) if pct.unit == "HU" else pct
    lo, hi = injection_range(pct01, art)
    out = inject_artifact(pct01, art)
    # the range lets a later reconstruction return to HU
    extra = {"hu_range": [lo * HU_SPAN + HU_MIN, hi * HU_SPAN + HU_MIN]} if pct.unit == "HU" else {}
    write_volume(out, args.out, extra=extra)
    return 0


def cmd_project(args) -> int:
    from .volcore import read_volume
    from .xproj import ConeBeamGeometry, add_projection_noise, forward_project, write_projections

    geo = ConeBeamGeometry.from_dict(_load_json(args.geometry, "geometry"))
    _vol1_exists(args.vol)
    vol = read_volume(args.vol)
    proj = add_projection_noise(forward_project(vol, geo), args.noise_sigma, args.seed)
    write_projections(proj, args.out)
    return 0


def cmd_reconstruct(args) -> int:
    from .osart import OsartConfig, osart_reconstruct, restore_hu
    from .volcore import Grid3, write_volume
    from .xproj import read_projections

    cfg = OsartConfig.from_dict(_load_json(args.osart_config, "osart"))
    grid = Grid3.from_dict(_load_json(args.grid, "grid"))
    proj_header = Path(str(args.proj).removesuffix(".proj.json").removesuffix(".proj.raw") + ".proj.json")
    if not proj_header.is_file():
        raise FileNotFoundError(str(proj_header))
    proj = read_projections(args.proj)
    recon, report = osart_reconstruct(proj, grid, cfg)
    if args.hu_range is not None:
        recon = restore_hu(recon, tuple(args.hu_range))
    write_volume(recon, args.out)
    if args.report:
        report.write(args.report)
    return 0


def cmd_compose(args) -> int:
    from .geomaug import PipelineConfig, compose_dataset
    from .volcore import read_labels, read_volume, sha256_file

    job = _load_json(args.config)
    cfg = PipelineConfig.from_dict(job["pipeline"])
    io = job.get("io", {})
    pct_path = args.pct or io.get("pct")
    cbct_path = args.cbct or io.get("cbct")
    labels_path = args.labels or io.get("labels")
    outdir = args.outdir or io.get("outdir")
    for flag, value in (("--pct", pct_path), ("--cbct", cbct_path), ("--labels", labels_path), ("--outdir", outdir)):
        if value is None:
            raise CliError("usage", f"{flag} is required (flag or io section of the config)")
    for path in (pct_path, cbct_path, labels_path):
        _vol1_exists(path)
    pct = read_volume(pct_path)
    cbct = read_volume(cbct_path)
    labels = read_labels(labels_path)

    def digest(path):
        # hash of the payload (the .mha file itself for MetaImage)
        return "sha256:" + sha256_file(_volume_files(path)[-1])

    inputs = {"pct": digest(pct_path), "cbct": digest(cbct_path), "labels": digest(labels_path)}
    manifest = compose_dataset(pct, cbct, labels, cfg, outdir, stem=io.get("stem", "case"), inputs=inputs)
    (Path(outdir) / "config.json").write_text(json.dumps(job, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"records": len(manifest), "manifest": str(Path(outdir) / "manifest.json")}))
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import EvalCase, format_mean_std, report
    from .volcore import read_labels, read_volume

    if len(args.pred) != len(args.truth):
        raise CliError("usage", "--pred and --truth need the same number of volumes")
    pred_labels = args.pred_labels or []
    truth_labels = args.truth_labels or []
    if len(pred_labels) != len(truth_labels) or (pred_labels and len(pred_labels) != len(args.pred)):
        raise CliError("usage", "--pred-labels and --truth-labels must pair one-to-one with --pred")
    cases = []
    names = set()
    for k, (p, t) in enumerate(zip(args.pred, args.truth)):
        for path in (p, t):
            _vol1_exists(path)
        name = Path(p).name.removesuffix(".json").removesuffix(".mha")
        if name in names:
            name = f"{name}_{k}"
        names.add(name)
        pl = tl = None
        if pred_labels:
            _vol1_exists(pred_labels[k])
            _vol1_exists(truth_labels[k])
            pl, tl = read_labels(pred_labels[k]), read_labels(truth_labels[k])
        cases.append(EvalCase(name, read_volume(p), read_volume(t), pl, tl))
    img, _ = report(cases, args.outdir, window=args.window)
    summary = {col: format_mean_std(m, s) for col, (m, s) in img.summary().items()}
    print(json.dumps(summary, ensure_ascii=False))
    return 0


def cmd_plan_net(args) -> int:
    from .ganplan import plan_net

    dims = args.input_dims
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3:
        raise CliError("usage", "--input-dims takes one or three integers")
    print(json.dumps(plan_net(args.arch, tuple(dims)).to_dict(), indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cbct-forge", description="Paired psCBCT dataset synthesis and evaluation.")
    ap.add_argument("--version", action="version", version=f"cbct-forge {__version__}")
    ap.add_argument("--schema", action="store_true", help="print the job JSON schema and exit")
    ap.add_argument("--threads", type=int, default=None, help="cap worker threads (default: $CBCT_FORGE_THREADS or all)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("extract", help="PL-AHE artifact extraction from a CBCT")
    p.add_argument("--cbct", required=True)
    p.add_argument("--params", required=True, help="JSON file with alpha, beta, window, gain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("inject", help="add an artifact to a pCT and rescale to [0, 1]")
    p.add_argument("--pct", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("project", help="cone-beam forward projection with optional noise")
    p.add_argument("--vol", required=True)
    p.add_argument("--geometry", required=True, help="JSON file with the cone-beam geometry")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("reconstruct", help="OS-SART reconstruction of a projection stack")
    p.add_argument("--proj", required=True)
    p.add_argument("--grid", required=True, help="JSON with dims, spacing_mm, origin_mm (a VOL1 header works)")
    p.add_argument("--osart-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="write residual history JSON here")
    p.add_argument("--hu-range", type=float, nargs=2, metavar=("LO", "HI"), default=None,
                   help="rescale the [0, 1] reconstruction to this HU range")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("compose", help="full paired-dataset synthesis from a job config")
    p.add_argument("--pct")
    p.add_argument("--cbct")
    p.add_argument("--labels")
    p.add_argument("--config", required=True)
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("evaluate", help="image and segmentation metric reports")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--pred-labels", nargs="+")
    p.add_argument("--truth-labels", nargs="+")
    p.add_argument("--outdir", required=True)
    p.add_argument("--window", type=int, default=7)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plan-net", help="layer shapes and receptive field of the cGAN networks")
    p.add_argument("--arch", required=True, choices=("generator", "discriminator"))
    p.add_argument("--input-dims", type=int, nargs="+", default=[128, 128, 128])
    p.set_defaults(func=cmd_plan_net)
    return ap


def _fail(code: str, message: str) -> int:
    print(f"cbct-forge: error: {message}", file=sys.stderr)
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return EXIT_CODES.get(code, 1)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.schema:
        from .schema import SCHEMA

        print(json.dumps(SCHEMA, indent=2))
        return 0
    if args.command is None:
        return _fail("usage", "a command is required (see --help)")
    try:
        set_threads(args.threads)
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", f"no such file: {exc.filename or exc}")
    except VolumeFormatError as exc:
        return _fail("format_error", str(exc))
    except GridMismatchError as exc:
        return _fail("grid_mismatch", str(exc))
    except UnitError as exc:
        return _fail("unit_error", str(exc))
    except (ValueError, KeyError) as exc:
        return _fail("invalid_value", str(exc))


if __name__ == "__main__":
    sys.exit(main())
