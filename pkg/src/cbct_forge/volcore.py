"""Volume containers, VOL1/MetaImage I/O, resampling and intensity/label encodings.

Arrays are stored with shape ``(nz, ny, nx)`` in C order, so the flattened
buffer is x-fastest. Grid triples (``dims``, ``spacing``, ``origin``) are
always given in x, y, z order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

HU_MIN = -1000.0
HU_MAX = 3095.0
HU_SPAN = HU_MAX - HU_MIN  # 4095

AIR_HU = HU_MIN
BACKGROUND = 0

UNITS = ("HU", "normalized01", "normalizedSigned", "unitless")
SCHEMES = ("eso1", "eso4")

# unit name on disk <-> in memory
_UNIT_TO_FILE = {
    "HU": "HU",
    "normalized01": "norm01",
    "normalizedSigned": "normSigned",
    "unitless": "unitless",
}
_FILE_TO_UNIT = {v: k for k, v in _UNIT_TO_FILE.items()}

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "f64le": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}

ORGANS = ("lungs", "heart", "spinal_cord", "esophagus")
SCHEME_LABELS = {
    "eso4": {"lungs": 1, "heart": 2, "spinal_cord": 3, "esophagus": 4},
    "eso1": {"esophagus": 1, "spinal_cord": 2, "heart": 3, "lungs": 4},
}
ORGAN_NAMES = {"lungs": "Lungs", "heart": "Heart", "spinal_cord": "Spinal Cord", "esophagus": "Esophagus"}


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


class GridMismatchError(ValueError):
    """Raised when two volumes that must share a grid do not."""


class UnitError(ValueError):
    """Raised when an operation receives a volume in the wrong intensity unit."""


def _triple(values, kind):
    out = tuple(kind(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected 3 values, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid3:
    """Regular voxel grid: ``dims`` (voxels), ``spacing`` (mm) and ``origin``
    (world mm of the centre of voxel (0, 0, 0)), each in x, y, z order."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", _triple(self.dims, int))
        object.__setattr__(self, "spacing", _triple(self.spacing, float))
        object.__setattr__(self, "origin", _triple(self.origin, float))
        if min(self.dims) < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.dims}")
        if not min(self.spacing) > 0:
            raise ValueError(f"grid spacing must be > 0, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        return self.dims[::-1]

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def center(self) -> np.ndarray:
        """World position (x, y, z) of the grid centre."""
        return np.asarray(self.origin) + 0.5 * (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def resized(self, dims) -> "Grid3":
        """Grid covering the same physical box (voxel edges) with new dims."""
        dims = _triple(dims, int)
        extent = np.asarray(self.dims) * np.asarray(self.spacing)
        spacing = extent / np.asarray(dims)
        lo_edge = np.asarray(self.origin) - 0.5 * np.asarray(self.spacing)
        origin = lo_edge + 0.5 * spacing
        return Grid3(dims, tuple(spacing), tuple(origin))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing_mm": list(self.spacing), "origin_mm": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid3":
        return cls(d["dims"], d.get("spacing_mm", (1.0, 1.0, 1.0)), d.get("origin_mm", (0.0, 0.0, 0.0)))


def _frozen(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class Volume3:
    """Scalar volume on a :class:`Grid3`. ``data`` has shape ``grid.shape``."""

    grid: Grid3
    data: np.ndarray
    unit: str = "unitless"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.unit not in UNITS:
            raise UnitError(f"unknown unit {self.unit!r}")
        data = np.asarray(self.data)
        if data.dtype.kind not in "fiu":
            raise TypeError(f"volume data must be numeric, got {data.dtype}")
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        if data.size != self.grid.size:
            raise ValueError(f"data length {data.size} does not match grid dims {self.grid.dims}")
        data = np.ascontiguousarray(data.reshape(self.grid.shape))
        object.__setattr__(self, "data", _frozen(data))

    def with_data(self, data, unit: str | None = None) -> "Volume3":
        return Volume3(self.grid, data, self.unit if unit is None else unit)


@dataclass(frozen=True)
class LabelVolume:
    """Integer organ mask on a :class:`Grid3`; labels in {0..4} under ``scheme``."""

    grid: Grid3
    labels: np.ndarray
    scheme: str = "eso4"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown label scheme {self.scheme!r}")
        labels = np.asarray(self.labels)
        if labels.size != self.grid.size:
            raise ValueError(f"label length {labels.size} does not match grid dims {self.grid.dims}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        if labels.size and (labels.min() < 0 or labels.max() > 4):
            raise ValueError("labels must lie in {0,1,2,3,4}")
        labels = np.ascontiguousarray(labels.reshape(self.grid.shape).astype(np.uint8))
        object.__setattr__(self, "labels", _frozen(labels))

    def label_of(self, organ: str) -> int:
        return SCHEME_LABELS[self.scheme][organ]

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def check_same_grid(a, b) -> None:
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _vol1_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def _detect_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix in (".mha", ".mhd"):
        return "MetaImage"
    return "VOL1"


def _read_vol1(path):
    header_path, raw_path = _vol1_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: malformed header ({exc})") from None
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "unit"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: missing header field {key!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"{header_path}: unsupported order {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    try:
        grid = Grid3(header["dims"], header["spacing_mm"], header["origin_mm"])
    except (TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: invalid grid ({exc})") from None
    dtype = _DTYPES[header["dtype"]]
    payload = raw_path.read_bytes()
    if len(payload) != grid.size * dtype.itemsize:
        raise VolumeFormatError(
            f"{raw_path}: dimension/data-length mismatch: dims {grid.dims} need "
            f"{grid.size} elements, payload holds {len(payload) / dtype.itemsize:g}"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    return header, grid, data.reshape(grid.shape)


def _parse_mha_header(blob: bytes, path) -> tuple[dict, int]:
    fields = {}
    pos = 0
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise VolumeFormatError(f"{path}: header ended before ElementDataFile")
        line = blob[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            return fields, pos


def _read_metaimage(path):
    path = Path(path)
    blob = path.read_bytes()
    fields, offset = _parse_mha_header(blob, path)
    if fields.get("ObjectType", "Image") != "Image":
        raise VolumeFormatError(f"{path}: ObjectType must be Image")
    if fields.get("NDims") != "3":
        raise VolumeFormatError(f"{path}: only NDims = 3 is supported")
    if fields.get("CompressedData", "False").lower() == "true":
        raise VolumeFormatError(f"{path}: compressed MetaImage payloads are not supported")
    if fields["ElementDataFile"] != "LOCAL":
        raise VolumeFormatError(f"{path}: only ElementDataFile = LOCAL is supported")
    etype = fields.get("ElementType")
    if etype not in ("MET_SHORT", "MET_FLOAT"):
        raise VolumeFormatError(f"{path}: unsupported ElementType {etype!r}")
    msb = (fields.get("BinaryDataByteOrderMSB") or fields.get("ElementByteOrderMSB") or "False").lower() == "true"
    dtype = np.dtype(("i2" if etype == "MET_SHORT" else "f4")).newbyteorder(">" if msb else "<")
    try:
        dims = [int(v) for v in fields["DimSize"].split()]
        spacing = [float(v) for v in fields.get("ElementSpacing", fields.get("ElementSize", "1 1 1")).split()]
        origin_txt = fields.get("Offset") or fields.get("Position") or fields.get("Origin") or "0 0 0"
        origin = [float(v) for v in origin_txt.split()]
        grid = Grid3(dims, spacing, origin)
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
    if "TransformMatrix" in fields:
        matrix = np.array([float(v) for v in fields["TransformMatrix"].split()])
        if matrix.size != 9 or not np.allclose(matrix.reshape(3, 3), np.eye(3)):
            raise VolumeFormatError(f"{path}: non-identity direction matrices are not supported")
    payload = blob[offset:]
    if len(payload) != grid.size * dtype.itemsize:
        raise VolumeFormatError(
            f"{path}: dimension/data-length mismatch: dims {grid.dims} need {grid.size} "
            f"elements, payload holds {len(payload) / dtype.itemsize:g}"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64 if etype == "MET_SHORT" else np.float32)
    return grid, data.reshape(grid.shape)


def read_volume(path, format: str | None = None, unit: str | None = None) -> Volume3:
    """Read a VOL1 (``.json`` + ``.raw``) or uncompressed MetaImage (``.mha``) volume.

    MetaImage files carry no unit, so they are read as ``unit`` (default HU).
    Volumes in HU are clamped to [-1000, 3095] on ingest.
    """
    fmt = format or _detect_format(path)
    if fmt == "VOL1":
        header, grid, data = _read_vol1(path)
        file_unit = header["unit"]
        if file_unit == "label":
            raise VolumeFormatError(f"{path}: label volume, use read_labels()")
        if file_unit not in _FILE_TO_UNIT:
            raise VolumeFormatError(f"{path}: unsupported unit {file_unit!r}")
        vol_unit = _FILE_TO_UNIT[file_unit]
        meta = {k: v for k, v in header.items() if k not in ("dims", "spacing_mm", "origin_mm", "dtype", "unit", "order")}
    elif fmt == "MetaImage":
        grid, data = _read_metaimage(path)
        vol_unit = unit or "HU"
        meta = {}
    else:
        raise ValueError(f"unknown volume format {fmt!r}")
    if vol_unit == "HU":
        data = np.clip(data, HU_MIN, HU_MAX)
    return Volume3(grid, data, vol_unit, meta)


def read_labels(path, scheme: str | None = None) -> LabelVolume:
    """Read a label volume. VOL1 label files record their scheme; MetaImage
    label maps default to ``eso4``."""
    if _detect_format(path) == "MetaImage":
        grid, data = _read_metaimage(path)
        return LabelVolume(grid, data, scheme or "eso4")
    header, grid, data = _read_vol1(path)
    if header["unit"] != "label":
        raise VolumeFormatError(f"{path}: not a label volume (unit {header['unit']!r})")
    return LabelVolume(grid, data, scheme or header.get("label_scheme", "eso4"))


def _write_vol1(path, grid: Grid3, data: np.ndarray, dtype_name: str, unit_name: str, extra: dict | None):
    header_path, raw_path = _vol1_paths(path)
    header = grid.to_dict()
    header.update({"dtype": dtype_name, "unit": unit_name, "order": "x-fastest"})
    if extra:
        header.update(extra)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype_name]).tobytes())
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header_path, raw_path


def write_volume(v: Volume3 | LabelVolume, path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``v`` as VOL1 (``<path>.json`` + ``<path>.raw``).

    float32 data is written as ``f32le`` and float64 as ``f64le`` so reading
    it back is bit-exact. Label volumes are written as ``u8``.
    """
    if isinstance(v, LabelVolume):
        extra = {"label_scheme": v.scheme, **(extra or {})}
        return _write_vol1(path, v.grid, v.labels, "u8", "label", extra)
    if not np.all(np.isfinite(v.data)):
        raise ValueError("volume contains NaN or infinite values")
    dtype_name = "f32le" if v.data.dtype == np.float32 else "f64le"
    meta = {**v.meta, **(extra or {})}
    return _write_vol1(path, v.grid, v.data, dtype_name, _UNIT_TO_FILE[v.unit], meta)


# ---------------------------------------------------------------------------
# Intensity and label encodings
# ---------------------------------------------------------------------------

def _require_unit(v: Volume3, unit: str):
    if v.unit != unit:
        raise UnitError(f"expected a volume in {unit}, got {v.unit}")


def normalize_ct(v: Volume3) -> Volume3:
    """HU in [-1000, 3095] -> [-1, 1] via ((I + 1000) / 4095) * 2 - 1."""
    _require_unit(v, "HU")
    data = ((v.data.astype(np.float64) + 1000.0) / HU_SPAN) * 2.0 - 1.0
    return Volume3(v.grid, data, "normalizedSigned")


def denormalize_ct(v: Volume3) -> Volume3:
    _require_unit(v, "normalizedSigned")
    data = (v.data.astype(np.float64) + 1.0) / 2.0 * HU_SPAN - 1000.0
    return Volume3(v.grid, data, "HU")


def hu_to_unit01(v: Volume3) -> Volume3:
    """Fixed window map of HU onto [0, 1]: (I + 1000) / 4095."""
    _require_unit(v, "HU")
    data = (np.clip(v.data.astype(np.float64), HU_MIN, HU_MAX) - HU_MIN) / HU_SPAN
    return Volume3(v.grid, data, "normalized01")


def unit01_to_hu(v: Volume3) -> Volume3:
    _require_unit(v, "normalized01")
    return Volume3(v.grid, v.data.astype(np.float64) * HU_SPAN + HU_MIN, "HU")


def encode_labels(lv: LabelVolume) -> Volume3:
    """Labels {0..4} -> {-1, -0.5, 0, 0.5, 1} via (L / 4) * 2 - 1."""
    return Volume3(lv.grid, (lv.labels.astype(np.float64) / 4.0) * 2.0 - 1.0, "normalizedSigned")


def decode_labels(v: Volume3, scheme: str = "eso4") -> LabelVolume:
    _require_unit(v, "normalizedSigned")
    scaled = (v.data.astype(np.float64) + 1.0) / 2.0 * 4.0
    labels = np.clip(np.floor(scaled + 0.5), 0, 4).astype(np.uint8)
    return LabelVolume(v.grid, labels, scheme)


def relabel(lv: LabelVolume, target: str) -> LabelVolume:
    """Renumber organs between the eso1 and eso4 orderings (background stays 0)."""
    if target not in SCHEMES:
        raise ValueError(f"unknown label scheme {target!r}")
    if target == lv.scheme:
        return lv
    lut = np.zeros(5, dtype=np.uint8)
    for organ, label in SCHEME_LABELS[lv.scheme].items():
        lut[label] = SCHEME_LABELS[target][organ]
    return LabelVolume(lv.grid, lut[lv.labels], target)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _target_coordinates(src: Grid3, target: Grid3) -> np.ndarray:
    # continuous source index (z, y, x) for every target voxel centre
    axes = []
    for ax in (2, 1, 0):
        world = target.origin[ax] + np.arange(target.dims[ax]) * target.spacing[ax]
        axes.append((world - src.origin[ax]) / src.spacing[ax])
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def resample(v: Volume3 | LabelVolume, target: Grid3, interp: str = "trilinear"):
    """Sample ``v`` onto ``target`` in world coordinates.

    Points outside the source voxel-centre support get -1000 HU for HU
    images, 0 otherwise (labels and non-HU images).
    """
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    is_label = isinstance(v, LabelVolume)
    if is_label and interp != "nearest":
        raise ValueError("label volumes can only be resampled with nearest interpolation")
    if target == v.grid:
        return v
    coords = _target_coordinates(v.grid, target)
    order = 1 if interp == "trilinear" else 0
    if is_label:
        out = ndimage.map_coordinates(v.labels, coords, order=0, mode="constant", cval=BACKGROUND)
        return LabelVolume(target, out, v.scheme)
    fill = AIR_HU if v.unit == "HU" else 0.0
    out = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=order, mode="constant", cval=fill)
    return Volume3(target, out.astype(v.data.dtype, copy=False), v.unit)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


__all__ = [
    "Grid3", "Volume3", "LabelVolume", "VolumeFormatError", "GridMismatchError", "UnitError",
    "read_volume", "read_labels", "write_volume", "normalize_ct", "denormalize_ct",
    "hu_to_unit01", "unit01_to_hu", "encode_labels", "decode_labels", "relabel", "resample",
    "check_same_grid", "sha256_file", "HU_MIN", "HU_MAX", "SCHEME_LABELS", "ORGANS", "ORGAN_NAMES",
]
