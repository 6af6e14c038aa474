"""Volume container plus NIfTI-1 and raw (``.vol`` + JSON sidecar) I/O.

Arrays are always held as float32 in Z, Y, X order, Z being the slice axis.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, UnsupportedError

__all__ = [
    "Volume",
    "load_volume",
    "save_volume",
    "normalize",
    "denormalize",
    "infer_format",
]

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (endianness applied at read time)
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with physical spacing.

    Attributes:
        data: float32 array shaped (Z, Y, X). Made read-only on construction.
        spacing: (dz, dy, dx) in millimeters.
        intensity_range: (lo, hi) of the data before any normalization.
        id: opaque identifier, usually the file stem.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    intensity_range: tuple | None = None
    id: str = ""
    normalized: bool = field(default=False, compare=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume must be 3D with non-empty axes, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"volume {self.id!r} contains NaN or infinite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise DataError(f"spacing must be three finite positive values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        if self.intensity_range is None:
            object.__setattr__(self, "intensity_range", (float(data.min()), float(data.max())))
        else:
            lo, hi = self.intensity_range
            object.__setattr__(self, "intensity_range", (float(lo), float(hi)))

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, spacing=None, **changes):
        """Copy of this volume with new voxels (and optionally new spacing)."""
        return replace(self, data=data, spacing=self.spacing if spacing is None else spacing, **changes)


def infer_format(path):
    name = str(path).lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti1"
    if name.endswith(".vol") or name.endswith(".json"):
        return "raw"
    raise FormatError(f"cannot infer volume format from {path!r}; use .nii, .nii.gz or .vol")


def load_volume(path, format=None):
    """Read a volume from disk.

    Args:
        path: ``.nii``/``.nii.gz`` file, or a raw ``.vol`` payload whose
            ``.json`` sidecar sits next to it.
        format: ``"nifti1"`` or ``"raw"``; inferred from the suffix if omitted.

    Returns:
        Volume in Z, Y, X order with spacing taken from the header/sidecar.
    """
    path = Path(path)
    format = format or infer_format(path)
    if format == "nifti1":
        data, spacing = _read_nifti(path)
        vid = path.name.removesuffix(".gz").removesuffix(".nii")
    elif format == "raw":
        data, spacing, vid = _read_raw(path)
    else:
        raise UnsupportedError(f"unknown volume format {format!r}")
    return Volume(data, spacing, id=vid)


def save_volume(v, path, format=None):
    path = Path(path)
    format = format or infer_format(path)
    if format == "nifti1":
        _write_nifti(v, path)
    elif format == "raw":
        _write_raw(v, path)
    else:
        raise UnsupportedError(f"unknown volume format {format!r}")


def normalize(v):
    """Min-max map to [0, 1]; the original range is kept for `denormalize`.

    A constant volume maps to zeros and records (c, c + 1) as its range.
    """
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi <= lo:
        hi = lo + 1.0
        out = np.zeros_like(v.data)
    else:
        out = (v.data.astype(np.float64) - lo) / (hi - lo)
        out = np.clip(out, 0.0, 1.0)
    return replace(v, data=out, intensity_range=(lo, hi), normalized=True)


def denormalize(v):
    lo, hi = v.intensity_range
    out = v.data.astype(np.float64) * (hi - lo) + lo
    return replace(v, data=out, intensity_range=(lo, hi), normalized=False)


# -- raw container ---------------------------------------------------------

def _raw_paths(path):
    path = Path(path)
    if path.suffix == ".json":
        return path.with_suffix(".vol"), path
    return path, path.with_suffix(".json")


def _read_raw(path):
    payload, sidecar = _raw_paths(path)
    try:
        meta = json.loads(sidecar.read_text())
        dims = [int(d) for d in meta["dims"]]
        spacing = [float(s) for s in meta["spacing_mm"]]
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed raw sidecar {sidecar}: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3:
        raise FormatError(f"raw sidecar {sidecar} must list 3 dims and 3 spacings")
    raw = payload.read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{payload} holds {len(raw)} bytes, sidecar dims need {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims)
    return data, spacing, str(meta.get("id", payload.stem))


def _write_raw(v, path):
    payload, sidecar = _raw_paths(path)
    payload.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    meta = {"dims": list(v.shape), "spacing_mm": list(v.spacing), "id": v.id or payload.stem}
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")


# -- NIfTI-1 ---------------------------------------------------------------

def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_nifti(path):
    raw = _read_bytes(path)
    if len(raw) < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    if raw[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: magic {raw[344:348]!r} is not single-file NIfTI-1")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])

    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d > 1 for d in dim[4 : ndim + 1]):
        raise FormatError(f"{path}: expected a 3D volume, dim={dim}")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {dim}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedError(f"{path}: NIfTI datatype code {datatype} not supported")
    if vox_offset < NIFTI_VOX_OFFSET:
        raise FormatError(f"{path}: vox_offset {vox_offset} < 352")

    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    if len(raw) < vox_offset + count * dtype.itemsize:
        raise FormatError(f"{path}: truncated voxel payload")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # on disk x varies fastest
    data = flat.reshape((nz, ny, nx))
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope != 0.0 and np.isfinite(slope) and np.isfinite(inter):
            data = data.astype(np.float64) * slope + inter
    dx, dy, dz = (abs(p) for p in pixdim[1:4])
    return data.astype(np.float32), (dz, dy, dx)


def _write_nifti(v, path):
    nz, ny, nx = v.shape
    dz, dy, dx = v.spacing
    hdr = bytearray(NIFTI_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)  # float32, bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    descrip = (v.id or "soupsr")[:79].encode("ascii", "replace")
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", hdr, 280, dx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, dy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, dz, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)
